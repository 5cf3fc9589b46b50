"""Brute-force reference implementations and the self-test suites built on them.

The references are deliberately naive (breadth-first search, permutation
enumeration, all-pairs distances) so they share no code path with the fast
implementations they check.
"""
from __future__ import annotations

import itertools
import time
from collections import deque

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .anatomy import init_anatomy_params, modulated_features
from .objectives import LossWeights, attr_loss, grad_check, org_loss, predicted_stats, seg_loss, sep_loss, total_loss
from .octree import HALO, apply_head, apply_head_monolithic, build_octree, init_head_params, refine_full
from .params import ParamStore
from .proposal import Proposal, init_verifier_params, unimodality_loss, verification_scores
from .report import parse_report
from .semgraph import build_graph, encode_graph, init_graph_params, querybank
from .volume import BBox3, label_array

# -- references -----------------------------------------------------------------

def offsets(connectivity):
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        n = sum(abs(x) for x in d)
        if n == 0:
            continue
        if (connectivity == 6 and n == 1) or (connectivity == 18 and n <= 2) or connectivity == 26:
            out.append(d)
    return out


def bfs_components(mask, connectivity=26):
    """Components as sorted linear-index arrays, largest first, ties by smallest index."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    steps = offsets(connectivity)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, comp = deque([start]), []
        while queue:
            v = queue.popleft()
            comp.append(np.ravel_multi_index(v, mask.shape))
            for d in steps:
                u = tuple(a + b for a, b in zip(v, d))
                if all(0 <= a < n for a, n in zip(u, mask.shape)) and mask[u] and not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(np.array(sorted(comp)))
    return sorted(comps, key=lambda c: (-len(c), int(c[0])))


def brute_force_assignment(dice_values, threshold=metrics.MATCH_DICE):
    """Best total Dice over every partial one-to-one matching of allowed pairs."""
    d = np.asarray(dice_values, dtype=np.float64)
    n, m = d.shape
    best = 0.0
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = max(best, sum(d[i, j] for i, j in enumerate(perm) if d[i, j] >= threshold))
    else:
        for perm in itertools.permutations(range(n), m):
            best = max(best, sum(d[i, j] for j, i in enumerate(perm) if d[i, j] >= threshold))
    return best


def brute_boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    for v in zip(*np.nonzero(mask)):
        for d in offsets(6):
            u = tuple(a + b for a, b in zip(v, d))
            if not all(0 <= a < n for a, n in zip(u, mask.shape)) or not mask[u]:
                out[v] = True
                break
    return out


def brute_hd95(a, b, spacing=(1.0, 1.0, 1.0)):
    """95th percentile of all-pairs nearest boundary distances, both directions."""
    pa = (np.argwhere(brute_boundary(a)) + 0.5) * np.asarray(spacing)
    pb = (np.argwhere(brute_boundary(b)) + 0.5) * np.asarray(spacing)
    dist = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return float(np.percentile(np.concatenate([dist.min(axis=1), dist.min(axis=0)]), 95))


# -- oracle suites --------------------------------------------------------------

def random_blobs(rng, shape, p=None):
    p = rng.uniform(0.1, 0.5) if p is None else p
    return rng.random(shape) < p


def check_components(n, rng, shape=(6, 6, 6)):
    worst = 0
    for _ in range(n):
        mask = random_blobs(rng, shape)
        conn = int(rng.choice([6, 18, 26]))
        fast = label_array(mask, conn)
        ref = bfs_components(mask, conn)
        same = len(fast) == len(ref) and all(np.array_equal(a, b) for a, b in zip(fast, ref))
        worst += not same
    return worst


def check_assignment(n, rng, max_size=6):
    worst = 0.0
    for _ in range(n):
        shape = rng.integers(1, max_size + 1, size=2)
        d = rng.random(shape) * (rng.random(shape) < 0.7)
        fast = sum(d[i, j] for i, j in metrics.assign(d))
        worst = max(worst, abs(fast - brute_force_assignment(d)))
    return worst


def check_hd95(n, rng, shape=(8, 8, 8)):
    worst = 0.0
    for _ in range(n):
        a, b = random_blobs(rng, shape, 0.15), random_blobs(rng, shape, 0.15)
        a[0, 0, 0] = b[-1, -1, -1] = True
        spacing = tuple(rng.uniform(0.5, 2.0, size=3))
        worst = max(worst, abs(metrics.hd95(a, b, spacing) - brute_hd95(a, b, spacing)))
    return worst


def check_tiling(n, rng, channels=8):
    """Haloed tile versus the head applied to the whole grid, single 4^3 node."""
    worst = 0.0
    for _ in range(n):
        store = init_head_params(ParamStore(), rng, channels)
        store["head.w2"] = torch.as_tensor(rng.standard_normal(store["head.w2"].shape) * 0.3)
        store["head.b2"] = torch.as_tensor(rng.standard_normal(1))
        g = 8
        feats = torch.as_tensor(rng.standard_normal((channels, g, g, g)))
        m = torch.as_tensor(rng.random((g, g, g)))
        full = apply_head_monolithic(feats, m, store)
        o = rng.integers(0, g - 4 + 1, size=3)
        x = F.pad(torch.cat([feats, m[None]]), (HALO,) * 6)
        tile = x[:, o[0] : o[0] + 4 + 2 * HALO, o[1] : o[1] + 4 + 2 * HALO, o[2] : o[2] + 4 + 2 * HALO]
        out = apply_head(tile[None], m[o[0] : o[0] + 4, o[1] : o[1] + 4, o[2] : o[2] + 4][None, None], store)[0, 0]
        ref = full[o[0] : o[0] + 4, o[1] : o[1] + 4, o[2] : o[2] + 4]
        worst = max(worst, float((out - ref).abs().max()))
    return worst


def oracle_suite(seed=2026, n_components=200, n_assign=200, n_hd95=50, n_tiling=20):
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    out = {
        "components_mismatches": check_components(n_components, rng),
        "assignment_max_error": check_assignment(n_assign, rng),
        "hd95_max_error": check_hd95(n_hd95, rng),
        "tiling_max_error": check_tiling(n_tiling, rng),
    }
    out["seconds"] = time.perf_counter() - t0
    return out


# -- gradient suite -------------------------------------------------------------

SAMPLE_REPORT = """\
case grad-check
organ 0 liver background_hu=60.0
organ 3 spleen background_hu=45.0
lesion 0 organ=0 loc=upper-medial volume_mm3=120.0 hu=20.0 :: hypodense lesion in the liver
lesion 1 organ=0 loc=lower-lateral volume_mm3=300.0 hu=95.0 :: hyperdense lesion in the liver
lesion 2 organ=3 loc=upper-lateral volume_mm3=80.0 hu=10.0 :: hypodense lesion in the spleen
"""


def _subset(store: ParamStore, prefixes):
    out = ParamStore()
    for k, v in store.items():
        if k.startswith(prefixes):
            out[k] = v
    return out


def _check(f, sub: ParamStore, rng, n_coords):
    theta0 = sub.flatten().detach()
    coords = rng.choice(theta0.numel(), size=min(n_coords, theta0.numel()), replace=False)
    return grad_check(lambda th: f(sub.unflatten(th)), theta0, coords=coords)


def grad_graph(rng, n_coords=40, d=16):
    store = init_graph_params(ParamStore(), rng, d=d, d_r=4, n_layers=2, n_queries=3)
    g = build_graph(parse_report(SAMPLE_REPORT))
    weights = torch.as_tensor(rng.standard_normal((len(g.lesion_nodes), 3, d)))

    def f(p):
        h = encode_graph(g, p)
        return sum((querybank(h[node], p) * w).sum() for node, w in zip(g.lesion_nodes, weights))

    return _check(f, store, rng, n_coords)


def grad_film(rng, n_coords=40, channels=8, shape=(4, 4, 3)):
    store = init_anatomy_params(ParamStore(), rng, n_organs=4, d_e=6, channels=channels)
    store["anat.psi_w2"] = torch.as_tensor(rng.standard_normal(store["anat.psi_w2"].shape) * 0.3)
    feats = torch.as_tensor(rng.standard_normal(shape + (channels,)))
    soft = torch.as_tensor(rng.random((4,) + shape))
    weights = torch.as_tensor(rng.standard_normal(shape + (channels,)))
    return _check(lambda p: (modulated_features(feats, soft, p) * weights).sum(), store, rng, n_coords)


def grad_verifier(rng, n_coords=40, channels=8, d=16, n_props=4):
    store = init_verifier_params(ParamStore(), rng, d=d, channels=channels)
    store["ver.ws"] = torch.as_tensor(rng.standard_normal(channels + d) * 0.3)
    store["ver.z"] = torch.as_tensor(rng.standard_normal(d) * 0.3)
    feats = torch.as_tensor(rng.standard_normal((125, channels)))
    props = []
    for k in range(n_props):
        vox = np.sort(rng.choice(125, size=int(rng.integers(2, 10)), replace=False))
        prop = Proposal(0, vox, BBox3((0, 0, 0), (1, 1, 1)), 0.0)
        prop.evidence = rng.random(3)
        props.append(prop)

    def f(p):
        scores = verification_scores(feats, props, p["ver.z"], p)
        return unimodality_loss([scores], tau=0.5)[0]

    return _check(f, store, rng, n_coords)


def grad_head(rng, n_coords=40, channels=8, g=16):
    store = init_head_params(ParamStore(), rng, channels)
    store["head.w2"] = torch.as_tensor(rng.standard_normal(store["head.w2"].shape) * 0.3)
    feats = torch.as_tensor(rng.standard_normal((g, g, g, channels)))
    lo = rng.integers(4, 8, size=3)
    box = np.zeros((g, g, g), dtype=bool)
    box[lo[0] : lo[0] + 4, lo[1] : lo[1] + 4, lo[2] : lo[2] + 3] = True
    voxels = np.flatnonzero(box)
    weights = torch.as_tensor(rng.standard_normal((g, g, g)))

    def f(p):
        tree = build_octree(BBox3.from_indices(voxels, (g, g, g)), (g, g, g))
        return (refine_full(voxels, feats, p, tree) * weights).sum()

    return _check(f, store, rng, n_coords)


def grad_losses(rng, n_coords=40, shape=(5, 5, 4)):
    hu = torch.as_tensor(rng.normal(40, 30, size=shape))
    organ = torch.as_tensor((rng.random(shape) < 0.6).astype(np.float64))
    gts = [torch.as_tensor((rng.random(shape) < 0.2).astype(np.float64)) for _ in range(2)]
    refs = [(float(rng.uniform(5, 30)), float(rng.uniform(10, 80))) for _ in range(2)]
    store = ParamStore()
    store.add("logits", rng.standard_normal((2,) + shape))
    store.add("scores", rng.standard_normal(5))
    w = LossWeights()

    def f(p):
        masks = torch.sigmoid(p["logits"])
        stats = [predicted_stats(m, hu, 1.0) for m in masks]
        terms = {
            "uni": unimodality_loss([p["scores"]])[0],
            "attr": attr_loss(stats, refs),
            "org": sum(org_loss(m, organ) for m in masks),
            "sep": sep_loss(list(masks)),
            "seg": sum(seg_loss(m, g) for m, g in zip(masks, gts)),
        }
        return total_loss(terms, 1, w).total_tensor

    return _check(f, store, rng, n_coords)


GRADIENT_CHECKS = {
    "graph": grad_graph,
    "film": grad_film,
    "verifier": grad_verifier,
    "head": grad_head,
    "losses": grad_losses,
}


def gradient_suite(seeds=range(10), n_coords=40):
    """Worst relative finite-difference error per component over ``seeds``."""
    worst = {name: 0.0 for name in GRADIENT_CHECKS}
    t0 = time.perf_counter()
    for seed in seeds:
        for name, check in GRADIENT_CHECKS.items():
            rng = np.random.default_rng([seed, list(GRADIENT_CHECKS).index(name)])
            worst[name] = max(worst[name], check(rng, n_coords))
    worst["seconds"] = time.perf_counter() - t0
    return worst


def run(quick=True):
    """Self-test summary: ``(ok, results)``."""
    if quick:
        oracles = oracle_suite(n_components=40, n_assign=40, n_hd95=10, n_tiling=5)
        grads = gradient_suite(seeds=range(2), n_coords=15)
    else:
        oracles = oracle_suite()
        grads = gradient_suite()
    ok = (
        oracles["components_mismatches"] == 0
        and oracles["assignment_max_error"] <= 1e-9
        and oracles["hd95_max_error"] <= 1e-9
        and oracles["tiling_max_error"] <= 1e-5
        and all(v < 1e-4 for k, v in grads.items() if k != "seconds")
    )
    return ok, {"oracles": oracles, "gradients": grads}
