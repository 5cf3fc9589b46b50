"""Dense 3D volumes, binary masks and the geometry helpers built on them.

Arrays are indexed ``[x, y, z]`` (plus a trailing channel axis for
:class:`Volume3`) and flattened in C order, so a voxel's linear index is
``(x * ny + y) * nz + z``.  Voxel centres sit at ``(index + 0.5) * spacing``
in millimetres.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import EmptyRegionError, ParameterError, ShapeError

VOLUME_MAGIC = b"GLEVEVOL01" + b"\0" * 6
_HEADER = struct.Struct("<4I3f")


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ParameterError(f"spacing must be three positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume3:
    """Float32 field of shape ``(nx, ny, nz, c)`` with mm spacing."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be (nx, ny, nz[, c]), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("volume contains non-finite values")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape[:3]

    @property
    def channels(self):
        return self.data.shape[3]

    @property
    def voxel_volume(self):
        return float(np.prod(np.asarray(self.spacing, dtype=np.float64)))

    def scalar(self):
        """The ``(nx, ny, nz)`` view of a single-channel volume."""
        if self.channels != 1:
            raise ShapeError(f"expected 1 channel, volume has {self.channels}")
        return self.data[..., 0]


@dataclass(frozen=True)
class Mask3:
    """Binary mask of shape ``(nx, ny, nz)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim == 4 and raw.shape[3] == 1:
            raw = raw[..., 0]
        if raw.ndim != 3 or min(raw.shape) < 1:
            raise ShapeError(f"mask data must be (nx, ny, nz), got shape {raw.shape}")
        if raw.dtype != bool:
            if not np.all((raw == 0) | (raw == 1)):
                raise ParameterError("mask values must be 0 or 1")
            raw = raw != 0
        data = np.ascontiguousarray(raw)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def count(self):
        return int(self.data.sum())

    def indices(self):
        """Sorted linear indices of foreground voxels."""
        return np.flatnonzero(self.data.ravel())

    @classmethod
    def from_indices(cls, indices, dims, spacing=(1.0, 1.0, 1.0)):
        flat = np.zeros(int(np.prod(dims)), dtype=bool)
        flat[np.asarray(indices, dtype=np.int64)] = True
        return cls(flat.reshape(dims), spacing)


@dataclass(frozen=True)
class BBox3:
    """Axis-aligned box, ``lo`` inclusive and ``hi`` exclusive."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ParameterError(f"invalid bbox lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def shape(self):
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def slices(self):
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    def within(self, dims):
        return all(a >= 0 and b <= n for a, b, n in zip(self.lo, self.hi, dims))

    @classmethod
    def from_indices(cls, indices, dims):
        coords = np.stack(np.unravel_index(np.asarray(indices, dtype=np.int64), dims), axis=1)
        if coords.size == 0:
            raise EmptyRegionError("cannot bound an empty voxel set")
        return cls(tuple(coords.min(axis=0)), tuple(coords.max(axis=0) + 1))


def gaussian_kernel1d(sigma, truncate=3.0):
    radius = int(math.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(arr, sigma, renormalize=True):
    """Separable truncated Gaussian over a 3D float array (float64 result).

    With ``renormalize`` the kernel is re-weighted where it overhangs the
    volume edge, so constant fields stay constant.
    """
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    kernel = gaussian_kernel1d(sigma)
    out = np.asarray(arr, dtype=np.float64)
    norm = np.ones_like(out) if renormalize else None
    for axis in range(3):
        out = ndimage.correlate1d(out, kernel, axis=axis, mode="constant", cval=0.0)
        if renormalize:
            norm = ndimage.correlate1d(norm, kernel, axis=axis, mode="constant", cval=0.0)
    if renormalize:
        out = out / norm
    return out


def gaussian_smooth(m: Mask3, sigma_vox: float = 1.0, renormalize: bool = True) -> Volume3:
    soft = smooth_array(m.data, sigma_vox, renormalize=renormalize)
    return Volume3(np.clip(soft, 0.0, 1.0), m.spacing)


def _structure(connectivity):
    rank = {6: 1, 18: 2, 26: 3}.get(connectivity)
    if rank is None:
        raise ParameterError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, rank)


def label_array(mask, connectivity=26):
    """Connected components of a boolean array.

    Returns a list of sorted linear-index arrays, ordered by size descending
    and then by smallest linear index.
    """
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=_structure(connectivity))
    if n == 0:
        return []
    flat = labels.ravel()
    fg = np.flatnonzero(flat)
    lab = flat[fg]
    order = np.argsort(lab, kind="stable")
    fg, lab = fg[order], lab[order]
    bounds = np.flatnonzero(np.diff(lab)) + 1
    comps = np.split(fg, bounds)
    comps.sort(key=lambda c: (-len(c), int(c[0])))
    return comps


def connected_components(m: Mask3, connectivity: int = 26):
    return label_array(m.data, connectivity)


def crop(v: Volume3, b: BBox3) -> Volume3:
    if not b.within(v.dims):
        raise ParameterError(f"bbox {b.lo}-{b.hi} outside volume dims {v.dims}")
    return Volume3(v.data[b.slices()], v.spacing)


def embed(sub: Volume3, lo, dims, fill=0.0) -> Volume3:
    """Place ``sub`` into a ``dims`` volume at offset ``lo`` (inverse of crop)."""
    b = BBox3(lo, tuple(a + s for a, s in zip(lo, sub.dims)))
    if not b.within(dims):
        raise ParameterError(f"sub-volume at {lo} does not fit in {dims}")
    out = np.full(tuple(dims) + (sub.channels,), fill, dtype=np.float32)
    out[b.slices()] = sub.data
    return Volume3(out, sub.spacing)


def upsample2_tensor(t: torch.Tensor) -> torch.Tensor:
    """Trilinear x2 upsampling of a ``(c, nx, ny, nz)`` tensor.

    Half-voxel aligned (voxel centres at index + 0.5) with edge clamping, so
    the output never leaves the input's value range.
    """
    return F.interpolate(t[None], scale_factor=2, mode="trilinear", align_corners=False)[0]


def upsample(v: Volume3, factor: int = 2) -> Volume3:
    if factor != 2:
        raise ParameterError("only dyadic (factor 2) upsampling is supported")
    t = torch.from_numpy(np.moveaxis(v.data, 3, 0).astype(np.float64))
    up = upsample2_tensor(t).numpy()
    spacing = tuple(s / 2 for s in v.spacing)
    return Volume3(np.moveaxis(up, 0, 3), spacing)


def voxel_centers_mm(indices, dims, spacing):
    coords = np.stack(np.unravel_index(np.asarray(indices, dtype=np.int64), dims), axis=1)
    return (coords.astype(np.float64) + 0.5) * np.asarray(spacing, dtype=np.float64)


def mask_stats(m: Mask3, ct: Volume3):
    """Return ``(volume_mm3, mean_hu, centroid_mm)`` of the masked region.

    Raises :class:`EmptyRegionError` for an empty mask; the error's
    ``volume_mm3`` attribute is 0.
    """
    if tuple(m.dims) != tuple(ct.dims):
        raise ShapeError(f"mask dims {m.dims} != volume dims {ct.dims}")
    idx = m.indices()
    volume = len(idx) * float(np.prod(np.asarray(m.spacing, dtype=np.float64)))
    if len(idx) == 0:
        err = EmptyRegionError("mean HU and centroid are undefined for an empty mask")
        err.volume_mm3 = 0.0
        raise err
    values = ct.scalar().ravel()[idx].astype(np.float64)
    centroid = voxel_centers_mm(idx, m.dims, m.spacing).mean(axis=0)
    return volume, float(values.mean()), tuple(float(c) for c in centroid)


def mask_volume_mm3(m: Mask3) -> float:
    return m.count() * float(np.prod(np.asarray(m.spacing, dtype=np.float64)))


# -- binary file format -------------------------------------------------------

def write_volume(path, v: Volume3):
    nx, ny, nz, c = v.data.shape
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(_HEADER.pack(nx, ny, nz, c, *v.spacing))
        fh.write(v.data.astype("<f4").tobytes(order="C"))


def write_mask(path, m: Mask3):
    write_volume(path, Volume3(m.data.astype(np.float32), m.spacing))


def read_volume(path) -> Volume3:
    raw = Path(path).read_bytes()
    if len(raw) < len(VOLUME_MAGIC) + _HEADER.size or raw[: len(VOLUME_MAGIC)] != VOLUME_MAGIC:
        raise ShapeError(f"{path}: not a volume file (bad magic or truncated header)")
    nx, ny, nz, c, sx, sy, sz = _HEADER.unpack_from(raw, len(VOLUME_MAGIC))
    offset = len(VOLUME_MAGIC) + _HEADER.size
    count = nx * ny * nz * c
    if len(raw) != offset + 4 * count:
        raise ShapeError(f"{path}: expected {count} values, file size mismatch")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(nx, ny, nz, c)
    return Volume3(data.astype(np.float32), (sx, sy, sz))


def read_mask(path) -> Mask3:
    v = read_volume(path)
    if v.channels != 1:
        raise ShapeError(f"{path}: mask file must have one channel")
    return Mask3(v.scalar(), v.spacing)
