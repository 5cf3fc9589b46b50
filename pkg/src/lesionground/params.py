"""Named parameter tensors and the flat f32 checkpoint format.

Checkpoint layout: 16-byte magic, little-endian u32 manifest length, a UTF-8
JSON manifest ``[{"name": ..., "shape": [...]}, ...]``, then every tensor's
values as little-endian f32 in manifest order.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ShapeError

CHECKPOINT_MAGIC = b"GLEVECKP01" + b"\0" * 6


class ParamStore(OrderedDict):
    """Ordered ``name -> tensor`` mapping; insertion order fixes the flat layout."""

    def add(self, name, array, dtype=torch.float64):
        self[name] = torch.as_tensor(np.asarray(array, dtype=np.float64), dtype=dtype).clone()
        return self[name]

    def group(self, prefix):
        return {k[len(prefix) :]: v for k, v in self.items() if k.startswith(prefix)}

    def requires_grad_(self, flag=True):
        for t in self.values():
            t.requires_grad_(flag)
        return self

    def detached(self, dtype=None):
        out = ParamStore()
        for k, v in self.items():
            t = v.detach().clone()
            out[k] = t.to(dtype) if dtype is not None else t
        return out

    def flatten(self):
        return torch.cat([v.reshape(-1) for v in self.values()]) if self else torch.zeros(0)

    def unflatten(self, flat):
        out = ParamStore()
        offset = 0
        for k, v in self.items():
            n = v.numel()
            out[k] = flat[offset : offset + n].reshape(v.shape)
            offset += n
        return out

    def numel(self):
        return sum(v.numel() for v in self.values())


def save_checkpoint(path, params: ParamStore):
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = json.dumps(manifest, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(v.detach().cpu().numpy().astype("<f4").tobytes(order="C"))


def load_checkpoint(path, dtype=torch.float64) -> ParamStore:
    raw = Path(path).read_bytes()
    n = len(CHECKPOINT_MAGIC)
    if raw[:n] != CHECKPOINT_MAGIC or len(raw) < n + 4:
        raise ShapeError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, n)
    try:
        manifest = json.loads(raw[n + 4 : n + 4 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise ShapeError(f"{path}: corrupt manifest ({exc})") from None
    offset = n + 4 + hlen
    out = ParamStore()
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if offset + 4 * count > len(raw):
            raise ShapeError(f"{path}: truncated at tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        out[entry["name"]] = torch.as_tensor(arr.astype(np.float64), dtype=dtype).clone()
        offset += 4 * count
    if offset != len(raw):
        raise ShapeError(f"{path}: trailing bytes after last tensor")
    return out
