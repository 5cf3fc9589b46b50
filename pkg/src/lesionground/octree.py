"""Octree over a selected candidate and coarse-to-fine autoregressive mask refinement.

Level ``l`` of a depth-``D`` tree samples the root cube with cells of
``2**(D - l)`` voxels, so every node of every level is a block of
``leaf_edge`` cells.  Level 0 is the max-pooled candidate indicator; each
later level upsamples the previous prediction, crops it with the pooled
organ-aware features for every active node and passes the pair through one
shared residual head.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ParameterError, SequencingError
from .params import ParamStore
from .volume import BBox3, upsample2_tensor

HALO = 2  # one voxel per 3x3x3 convolution
LOGIT_EPS = 1e-6


@dataclass
class OctreeConfig:
    margin: int = 4
    min_block: int = 4
    activity_threshold: float = 0.05
    max_depth: int | None = None


@dataclass
class OctreeNode:
    level: int
    cube: BBox3  # global voxel coordinates, may overhang the volume
    children: tuple = ()
    parent: int | None = None
    active: bool = False


@dataclass
class Octree:
    root_lo: tuple
    root_edge: int
    depth: int
    nodes: list = field(default_factory=list)
    levels: list = field(default_factory=list)  # node ids per level

    @property
    def leaf_edge(self):
        return self.root_edge >> self.depth

    def cells(self, level):
        """Grid size of the root cube at ``level``."""
        return self.leaf_edge << level

    def cell_offset(self, node_id):
        """Offset of a node inside its level's grid, in cells."""
        node = self.nodes[node_id]
        scale = 1 << (self.depth - node.level)
        return tuple((a - r) // scale for a, r in zip(node.cube.lo, self.root_lo))

    def root_box(self):
        return BBox3(self.root_lo, tuple(r + self.root_edge for r in self.root_lo))


def next_pow2(n):
    return 1 << max(0, math.ceil(math.log2(max(n, 1))))


def build_octree(bbox: BBox3, dims, cfg: OctreeConfig | None = None) -> Octree:
    """Dyadic tree whose root cube encloses ``bbox`` plus a margin.

    The cube is shifted inside the volume when it fits and otherwise overhangs
    it; overhanging voxels are treated as zero-feature padding.
    """
    cfg = cfg or OctreeConfig()
    if cfg.min_block < 1 or cfg.min_block & (cfg.min_block - 1):
        raise ParameterError(f"min_block must be a power of two, got {cfg.min_block}")
    extent = max(bbox.shape)
    edge = max(next_pow2(extent + 2 * cfg.margin), cfg.min_block)
    lo = []
    for a, s, n in zip(bbox.lo, bbox.shape, dims):
        start = a + (s - edge) // 2
        if edge <= n:
            start = min(max(start, 0), n - edge)
        else:
            start = min(max(start, n - edge), 0)
        lo.append(start)
    depth = int(round(math.log2(edge // cfg.min_block))) if edge > cfg.min_block else 0
    if cfg.max_depth is not None:
        depth = min(depth, cfg.max_depth)

    tree = Octree(tuple(lo), edge, depth)
    tree.nodes.append(OctreeNode(0, tree.root_box()))
    tree.levels.append([0])
    for level in range(1, depth + 1):
        ids = []
        for pid in tree.levels[level - 1]:
            parent = tree.nodes[pid]
            half = parent.cube.shape[0] // 2
            kids = []
            for dx in (0, half):
                for dy in (0, half):
                    for dz in (0, half):
                        clo = (parent.cube.lo[0] + dx, parent.cube.lo[1] + dy, parent.cube.lo[2] + dz)
                        tree.nodes.append(OctreeNode(level, BBox3(clo, tuple(c + half for c in clo)), parent=pid))
                        kids.append(len(tree.nodes) - 1)
            parent.children = tuple(kids)
            ids.extend(kids)
        tree.levels.append(ids)
    return tree


# -- refinement head ------------------------------------------------------------

def init_head_params(store: ParamStore, rng, channels=8, hidden=8):
    fan1 = (channels + 1) * 27
    store.add("head.w1", rng.standard_normal((hidden, channels + 1, 3, 3, 3)) / math.sqrt(fan1))
    store.add("head.b1", np.zeros(hidden))
    # zero second layer: the head starts as a pass-through of the conditional mask
    store.add("head.w2", np.zeros((1, hidden, 3, 3, 3)))
    store.add("head.b2", np.zeros(1))
    return store


def head_residual(x_padded, store):
    """Two valid 3x3x3 convolutions; input carries a ``HALO``-cell border."""
    h = F.gelu(F.conv3d(x_padded, store["head.w1"], store["head.b1"]))
    return F.conv3d(h, store["head.w2"], store["head.b2"])


def mask_logit(m):
    m = LOGIT_EPS + (1.0 - 2.0 * LOGIT_EPS) * m
    return torch.log(m) - torch.log1p(-m)


def apply_head(x_padded, m, store):
    """``sigmoid(residual + logit(m))`` for a batch of haloed tiles."""
    return torch.sigmoid(head_residual(x_padded, store) + mask_logit(m))


def apply_head_monolithic(features, m, store):
    """Reference: the head over a whole ``(C, g, g, g)`` level grid at once."""
    x = torch.cat([features, m[None]], dim=0)
    xp = F.pad(x, (HALO,) * 6)[None]
    return apply_head(xp, m[None, None], store)[0, 0]


# -- levels ---------------------------------------------------------------------

def initial_mask(tree: Octree, candidate_indicator: torch.Tensor):
    """Level-0 prediction: max-pool of the root-cube candidate indicator."""
    k = 1 << tree.depth
    return F.max_pool3d(candidate_indicator[None, None], kernel_size=k)[0, 0]


def feature_pyramid(root_features: torch.Tensor, depth: int):
    """Average-pooled ``(C, g, g, g)`` feature grids for levels ``0..depth``."""
    out = []
    for level in range(depth + 1):
        k = 1 << (depth - level)
        out.append(root_features if k == 1 else F.avg_pool3d(root_features[None], kernel_size=k)[0])
    return out


def mark_active(tree: Octree, level: int, m_up: torch.Tensor, threshold: float):
    """Flag level-``level`` nodes whose parent is active and whose cube holds
    upsampled prior mass at or above ``threshold``."""
    b = tree.leaf_edge
    values = m_up.detach()
    active = []
    for nid in tree.levels[level]:
        node = tree.nodes[nid]
        node.active = False
        if node.parent is not None and not tree.nodes[node.parent].active:
            continue
        ox, oy, oz = tree.cell_offset(nid)
        if float(values[ox : ox + b, oy : oy + b, oz : oz + b].max()) >= threshold:
            node.active = True
            active.append(nid)
    return active


def refine_level(level, prev, level_features, tree: Octree, store, threshold=0.05):
    """Prediction at ``level`` from the level below, restricted to active nodes."""
    if level < 1 or level > tree.depth:
        raise SequencingError(f"level {level} outside 1..{tree.depth}")
    g = tree.cells(level)
    if prev is None or tuple(prev.shape) != (g // 2,) * 3:
        raise SequencingError(f"level {level} needs a level-{level - 1} prediction of size {g // 2}")
    m_up = upsample2_tensor(prev[None])[0]
    active = mark_active(tree, level, m_up, threshold)
    out = m_up.new_zeros((g, g, g))
    if not active:
        return out
    b = tree.leaf_edge
    x = F.pad(torch.cat([level_features, m_up[None]], dim=0), (HALO,) * 6)
    tiles, masks, offsets = [], [], []
    for nid in active:
        ox, oy, oz = tree.cell_offset(nid)
        tiles.append(x[:, ox : ox + b + 2 * HALO, oy : oy + b + 2 * HALO, oz : oz + b + 2 * HALO])
        masks.append(m_up[ox : ox + b, oy : oy + b, oz : oz + b])
        offsets.append((ox, oy, oz))
    pred = apply_head(torch.stack(tiles), torch.stack(masks)[:, None], store)[:, 0]
    for (ox, oy, oz), tile in zip(offsets, pred):
        out[ox : ox + b, oy : oy + b, oz : oz + b] = tile
    return out


def root_crop(volume_features: torch.Tensor, tree: Octree):
    """``(C, E, E, E)`` crop of a ``(nx, ny, nz, C)`` tensor over the root cube, zero-padded."""
    dims = volume_features.shape[:3]
    e = tree.root_edge
    src, dst = [], []
    for r, n in zip(tree.root_lo, dims):
        a, b = max(r, 0), min(r + e, n)
        src.append(slice(a, b))
        dst.append(slice(a - r, b - r))
    out = volume_features.new_zeros((e, e, e) + tuple(volume_features.shape[3:]))
    out[tuple(dst)] = volume_features[tuple(src)]
    return out


def paste_root(root_values: torch.Tensor, tree: Octree, dims):
    """Inverse of :func:`root_crop` for a scalar grid; outside the cube is 0."""
    e = tree.root_edge
    src, dst = [], []
    for r, n in zip(tree.root_lo, dims):
        a, b = max(r, 0), min(r + e, n)
        dst.append(slice(a, b))
        src.append(slice(a - r, b - r))
    out = root_values.new_zeros(tuple(dims))
    out[tuple(dst)] = root_values[tuple(src)]
    return out


def candidate_indicator(voxels, dims, dtype=torch.float64):
    flat = torch.zeros(int(np.prod(dims)), dtype=dtype)
    flat[torch.as_tensor(np.asarray(voxels, dtype=np.int64))] = 1.0
    return flat.reshape(tuple(dims))


def refine_full(voxels, features, store, tree: Octree, threshold=0.05, depth=None, return_levels=False):
    """Full-resolution soft mask (volume shaped) refined from a candidate.

    ``features`` is the ``(nx, ny, nz, C)`` organ-aware feature tensor.
    With ``depth=0`` the result is the binary candidate indicator.
    """
    dims = tuple(features.shape[:3])
    depth = tree.depth if depth is None else depth
    if depth != tree.depth:
        raise ParameterError(f"tree depth is {tree.depth}, requested {depth}")
    indicator = root_crop(candidate_indicator(voxels, dims, features.dtype)[..., None], tree)[..., 0]
    y = initial_mask(tree, indicator)
    tree.nodes[0].active = bool(float(y.max()) >= threshold)
    levels = [y]
    if depth > 0:
        feats = feature_pyramid(root_crop(features, tree).movedim(-1, 0), depth)
        for level in range(1, depth + 1):
            y = refine_level(level, y, feats[level], tree, store, threshold)
            levels.append(y)
    full = paste_root(y, tree, dims)
    return (full, levels) if return_levels else full
