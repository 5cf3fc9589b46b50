"""Query response maps, candidate regions, region verification and the
unimodality (candidate entropy) objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import NoCandidateError, ParameterError, ShapeError
from .params import ParamStore
from .volume import BBox3, label_array

HU_MATCH_SCALE = 20.0


@dataclass
class CandidateConfig:
    quantile: float = 0.995
    min_voxels: int = 2
    max_fraction: float = 0.2
    connectivity: int = 26


@dataclass
class Proposal:
    lesion_id: int
    voxels: np.ndarray  # sorted linear indices
    bbox: BBox3
    mean_response: float
    volume_mm3: float = float("nan")
    mean_hu: float = float("nan")
    organ_overlap: float = float("nan")
    evidence: np.ndarray = field(default_factory=lambda: np.zeros(3))
    feature: torch.Tensor | None = None
    score: float = float("nan")
    soft_assign: float = float("nan")

    @property
    def n_voxels(self):
        return len(self.voxels)

    def to_json(self, selected=False):
        def num(x):
            return None if x is None or not math.isfinite(x) else float(x)

        return {
            "lesion_id": self.lesion_id,
            "bbox": {"lo": list(self.bbox.lo), "hi": list(self.bbox.hi)},
            "n_voxels": int(self.n_voxels),
            "volume_mm3": num(self.volume_mm3),
            "mean_hu": num(self.mean_hu),
            "organ_overlap": num(self.organ_overlap),
            "mean_response": num(self.mean_response),
            "score": num(self.score),
            "soft_assign": num(self.soft_assign),
            "selected": bool(selected),
        }


def init_verifier_params(store: ParamStore, rng, d=32, channels=8):
    store.add("ver.ws", rng.standard_normal(channels + d) * 0.1 / math.sqrt(channels + d))
    # evidence weights start positive so attribute-consistent regions win before training
    store.add("ver.eta", np.ones(3))
    return store


def project_queries(queries: torch.Tensor, store) -> torch.Tensor:
    """Map ``(M, d)`` queries into the ``C``-channel feature space."""
    proj = store["qproj"]
    if queries.shape[-1] != proj.shape[1]:
        raise ShapeError(f"query dim {queries.shape[-1]} != projection input {proj.shape[1]}")
    return queries @ proj.T


def response_map(queries_c: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    """Max over queries of the voxel-wise cosine similarity.

    ``queries_c`` is ``(M, C)`` and ``features`` is ``(*spatial, C)``;
    voxels with a zero feature vector respond 0.
    """
    if queries_c.shape[-1] != features.shape[-1]:
        raise ShapeError(f"query channels {queries_c.shape[-1]} != feature channels {features.shape[-1]}")
    fnorm = features.norm(dim=-1, keepdim=True)
    qnorm = queries_c.norm(dim=-1)
    safe_f = torch.where(fnorm > 0, fnorm, torch.ones_like(fnorm))
    safe_q = torch.where(qnorm > 0, qnorm, torch.ones_like(qnorm))
    cos = (features / safe_f) @ (queries_c / safe_q[:, None]).T
    return cos.max(dim=-1).values


def generate_candidates(S: np.ndarray, k_p: int, cfg: CandidateConfig | None = None, lesion_id: int = 0):
    """Top-``k_p`` connected high-response regions of a response map."""
    cfg = cfg or CandidateConfig()
    if k_p < 1:
        raise ParameterError(f"k_p must be >= 1, got {k_p}")
    S = np.asarray(S, dtype=np.float64)
    if S.size == 0 or float(S.max() - S.min()) <= np.finfo(np.float32).eps:
        return []
    threshold = np.quantile(S, cfg.quantile)
    comps = label_array(S >= threshold, cfg.connectivity)
    flat = S.ravel()
    max_voxels = cfg.max_fraction * S.size
    ranked = []
    for comp in comps:
        if len(comp) < cfg.min_voxels or len(comp) > max_voxels:
            continue
        ranked.append((-float(flat[comp].mean()), int(comp[0]), comp))
    ranked.sort(key=lambda r: (r[0], r[1]))
    return [
        Proposal(lesion_id, comp, BBox3.from_indices(comp, S.shape), -neg)
        for neg, _, comp in ranked[:k_p]
    ]


def region_evidence(prop: Proposal, ct_flat, soft_organ_flat, voxel_volume, record, eps=1e-8):
    """Fill region statistics and return ``(overlap, volume_match, hu_match)``."""
    prop.volume_mm3 = len(prop.voxels) * voxel_volume
    prop.mean_hu = float(np.asarray(ct_flat, dtype=np.float64)[prop.voxels].mean())
    prop.organ_overlap = float(np.clip(np.asarray(soft_organ_flat, dtype=np.float64)[prop.voxels].mean(), 0.0, 1.0))
    v_ref, mu_ref = record.reported_volume_mm3, record.reported_mean_hu
    volume_match = math.exp(-abs(prop.volume_mm3 - v_ref) / (v_ref + eps))
    hu_match = math.exp(-abs(prop.mean_hu - mu_ref) / HU_MATCH_SCALE)
    prop.evidence = np.array([prop.organ_overlap, volume_match, hu_match])
    return prop.evidence


def verification_scores(features_flat, props, z, store):
    """Scores ``sigmoid(w_s . [v ; z]) + eta . xi`` for each proposal (differentiable)."""
    rows = []
    for prop in props:
        v = features_flat[torch.as_tensor(prop.voxels)].mean(dim=0)
        prop.feature = v
        rows.append(torch.cat([v, z]))
    stacked = torch.stack(rows)
    xi = torch.as_tensor(np.stack([p.evidence for p in props]), dtype=stacked.dtype)
    return torch.sigmoid(stacked @ store["ver.ws"]) + xi @ store["ver.eta"]


def verify(props, z, features_flat, soft_organ_flat, ct_flat, voxel_volume, record, store, eps=1e-8):
    """Score proposals and pick the best; returns ``(scores tensor, selected index)``."""
    if not props:
        raise NoCandidateError(f"no candidate regions for lesion {record.lesion_id}")
    for prop in props:
        region_evidence(prop, ct_flat, soft_organ_flat, voxel_volume, record, eps)
    scores = verification_scores(features_flat, props, z, store)
    values = scores.detach().cpu().numpy()
    for prop, s in zip(props, values):
        prop.score = float(s)
    selected = int(np.argmax(values))  # first maximum on ties
    return scores, selected


def soft_assignments(scores: torch.Tensor, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    return torch.softmax(scores / tau, dim=0)


def unimodality_loss(score_sets, tau=0.5, eps=1e-8):
    """Summed entropy of the temperature-scaled candidate distributions.

    Lesions are reduced in the given order.  Returns ``(loss, [assignments])``.
    """
    total = None
    assigns = []
    for scores in score_sets:
        p = soft_assignments(scores, tau)
        assigns.append(p)
        term = -(p * torch.log(p + eps)).sum()
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros((), dtype=torch.float64)
    return total, assigns
