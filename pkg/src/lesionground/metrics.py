"""Voxel and lesion-level evaluation: Dice, HD95, lesion recall and the
centroid-penalised lesion localisation score."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError, ShapeError, UndefinedMetricError
from .volume import label_array, voxel_centers_mm

MATCH_DICE = 0.1
D0_MM = 20.0


def _as_bool(m):
    return np.asarray(getattr(m, "data", m), dtype=bool)


def dice(a, b) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask):
    """Foreground voxels with a 6-connected background neighbour or on the volume edge."""
    mask = _as_bool(mask)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX, border_value=0)


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Symmetric multiset of boundary-to-nearest-boundary distances in mm."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distance needs two non-empty masks")
    ba, bb = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)[ba]
    to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)[bb]
    return np.concatenate([to_b, to_a])


def hd95(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(np.percentile(surface_distances(a, b, spacing), 95))


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0)) -> float:
    return float(surface_distances(a, b, spacing).max())


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)  # (gt index, pred index, dice, centroid distance mm)
    unmatched_gt: list = field(default_factory=list)
    unmatched_pred: list = field(default_factory=list)
    n_gt: int = 0
    n_pred: int = 0

    @property
    def n_matched(self):
        return len(self.pairs)

    def to_json(self):
        return [
            {"gt": int(i), "pred": int(j), "dice": float(d), "centroid_dist_mm": float(c)}
            for i, j, d, c in self.pairs
        ]


def dice_matrix(gt_comps, pred_comps):
    out = np.zeros((len(gt_comps), len(pred_comps)))
    for i, g in enumerate(gt_comps):
        for j, p in enumerate(pred_comps):
            inter = len(np.intersect1d(g, p, assume_unique=True))
            if inter:
                out[i, j] = 2.0 * inter / (len(g) + len(p))
    return out


def assign(dice_values, threshold=MATCH_DICE):
    """Maximum-total-Dice one-to-one assignment over entries ``>= threshold``."""
    dice_values = np.asarray(dice_values, dtype=np.float64)
    if dice_values.size == 0:
        return []
    allowed = dice_values >= threshold
    rows, cols = linear_sum_assignment(-np.where(allowed, dice_values, 0.0))
    return sorted((int(i), int(j)) for i, j in zip(rows, cols) if allowed[i, j])


def match_components(gt_comps, pred_comps, dims, spacing, threshold=MATCH_DICE):
    dm = dice_matrix(gt_comps, pred_comps)
    result = MatchResult(n_gt=len(gt_comps), n_pred=len(pred_comps))
    for i, j in assign(dm, threshold):
        cg = voxel_centers_mm(gt_comps[i], dims, spacing).mean(axis=0)
        cp = voxel_centers_mm(pred_comps[j], dims, spacing).mean(axis=0)
        result.pairs.append((i, j, float(dm[i, j]), float(np.linalg.norm(cg - cp))))
    matched_gt = {p[0] for p in result.pairs}
    matched_pred = {p[1] for p in result.pairs}
    result.unmatched_gt = [i for i in range(len(gt_comps)) if i not in matched_gt]
    result.unmatched_pred = [j for j in range(len(pred_comps)) if j not in matched_pred]
    return result


def match_lesions(gt, pred, spacing=(1.0, 1.0, 1.0), connectivity=26, threshold=MATCH_DICE) -> MatchResult:
    gt, pred = _as_bool(gt), _as_bool(pred)
    if gt.shape != pred.shape:
        raise ShapeError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return match_components(label_array(gt, connectivity), label_array(pred, connectivity), gt.shape, spacing, threshold)


def lesion_recall(m: MatchResult) -> float:
    if m.n_gt == 0:
        raise UndefinedMetricError("lesion recall is undefined without ground-truth lesions")
    return m.n_matched / m.n_gt


def lls(m: MatchResult, d0: float = D0_MM) -> float:
    """Mean over GT lesions of ``dice * exp(-d / d0)``; unmatched lesions add 0."""
    if m.n_gt == 0:
        raise UndefinedMetricError("LLS is undefined without ground-truth lesions")
    if not d0 > 0:
        raise ParameterError(f"d0 must be positive, got {d0}")
    return sum(d * math.exp(-dist / d0) for _, _, d, dist in m.pairs) / m.n_gt


def evaluate_case(pred, gt, spacing=(1.0, 1.0, 1.0), connectivity=26, d0=D0_MM):
    """Per-case metric record.

    An empty prediction against a non-empty ground truth gets the volume
    diagonal as its HD95 (flagged ``hd95_penalized``) so it can be averaged.
    """
    pred, gt = _as_bool(pred), _as_bool(gt)
    m = match_lesions(gt, pred, spacing, connectivity)
    record = {"dice": dice(pred, gt), "n_gt": m.n_gt, "n_pred": m.n_pred, "n_matched": m.n_matched}
    if pred.any() and gt.any():
        record["hd95"], record["hd95_penalized"] = hd95(pred, gt, spacing), False
    elif not pred.any() and not gt.any():
        record["hd95"], record["hd95_penalized"] = 0.0, False
    else:
        extent = np.asarray(gt.shape) * np.asarray(spacing, dtype=np.float64)
        record["hd95"], record["hd95_penalized"] = float(np.linalg.norm(extent)), True
    record["lr"] = lesion_recall(m) if m.n_gt else None
    record["lls"] = lls(m, d0) if m.n_gt else None
    record["matches"] = m.to_json()
    return record


def aggregate(records, keys=("dice", "hd95", "lr", "lls")):
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in records if r.get(k) is not None], dtype=np.float64)
        out[k] = {"mean": float(vals.mean()) if vals.size else None, "std": float(vals.std()) if vals.size else None, "n": int(vals.size)}
    return out
