"""End-to-end grounding: report to queries, organ-aware features to verified
candidates, candidates to refined lesion masks; plus training and evaluation."""
from __future__ import annotations

import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import torch

from . import metrics
from .anatomy import N_FEATURES, feature_bank, init_anatomy_params, modulated_features
from .errors import GroundingError, NumericError, ParameterError, StageError
from .objectives import (
    AdamW,
    LossWeights,
    attr_loss,
    clip_grad_norm,
    cosine_lr,
    org_loss,
    predicted_stats,
    seg_loss,
    sep_loss,
    total_loss,
)
from .octree import OctreeConfig, build_octree, candidate_indicator, init_head_params, refine_full
from .params import ParamStore
from .proposal import (
    CandidateConfig,
    Proposal,
    generate_candidates,
    init_verifier_params,
    project_queries,
    response_map,
    soft_assignments,
    unimodality_loss,
    verify,
)
from .semgraph import build_graph, direct_text_summary, encode_graph, init_graph_params, querybank
from .volume import BBox3, gaussian_smooth

N_ORGANS = 4
QUERY_PREFIXES = ("graph.", "qb.", "qproj")


@dataclass
class PipelineConfig:
    # report reasoning
    d: int = 32
    d_r: int = 8
    n_layers: int = 2
    n_queries: int = 4
    embed_seed: int = 2026
    # features and anatomy
    channels: int = N_FEATURES
    n_organs: int = N_ORGANS
    organ_embed_dim: int = 16
    organ_sigma: float = 1.0
    # proposals
    k_p: int = 5
    tau: float = 0.5
    eps: float = 1e-8
    quantile: float = 0.995
    min_voxels: int = 2
    max_fraction: float = 0.2
    connectivity: int = 26
    # refinement
    margin: int = 4
    min_block: int = 4
    activity_threshold: float = 0.05
    max_depth: int = -1  # -1: as deep as the root cube allows
    # evaluation
    d0: float = 20.0
    binarize: float = 0.5
    # losses
    w_uni: float = 0.1
    w_con: float = 0.001  # the volume term is stiff at init; see README
    w_sep: float = 0.1
    w_seg: float = 1.0
    w_weak: float = 1.0
    surrogate: str = "sigmoid"  # gradient path past candidate selection: identity or sigmoid
    kappa: float = 10.0  # sigmoid surrogate sharpness
    # optimiser
    lr: float = 1e-3
    weight_decay: float = 0.01
    max_grad_norm: float = 0.0  # 0 disables global clipping
    # learning-rate multipliers per parameter group
    query_lr_scale: float = 1.0
    anatomy_lr_scale: float = 0.1
    verifier_lr_scale: float = 10.0
    head_lr_scale: float = 1.0
    eval_every: int = 50
    seed: int = 2026
    # ablations
    lequ_off: bool = False
    anver_off: bool = False
    ocre_off: bool = False
    anatomy_off: bool = False
    verify_off: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        positive_int = ("d", "d_r", "n_layers", "n_queries", "channels", "n_organs", "organ_embed_dim", "k_p", "min_voxels", "min_block", "eval_every")
        for name in positive_int:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ParameterError(f"{name} must be a positive integer, got {v!r}")
        if self.channels != N_FEATURES:
            raise ParameterError(f"channels must equal the feature bank width {N_FEATURES}")
        if self.min_block & (self.min_block - 1):
            raise ParameterError(f"min_block must be a power of two, got {self.min_block}")
        if self.margin < 0 or self.max_depth < -1:
            raise ParameterError("margin must be >= 0 and max_depth >= -1")
        for name in ("tau", "eps", "organ_sigma", "d0", "kappa"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if not 0.0 < self.quantile < 1.0:
            raise ParameterError(f"quantile must be in (0, 1), got {self.quantile}")
        for name in ("max_fraction", "binarize"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ParameterError(f"{name} must be in (0, 1]")
        if not 0.0 <= self.activity_threshold <= 1.0:
            raise ParameterError("activity_threshold must be in [0, 1]")
        if self.connectivity not in (6, 18, 26):
            raise ParameterError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        for name in ("lr", "weight_decay", "max_grad_norm", "query_lr_scale", "anatomy_lr_scale", "verifier_lr_scale", "head_lr_scale"):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.surrogate not in ("identity", "sigmoid"):
            raise ParameterError(f"surrogate must be identity or sigmoid, got {self.surrogate!r}")
        LossWeights(self.w_uni, self.w_con, self.w_sep, self.w_seg, self.w_weak, self.eps)
        for name in ("lequ_off", "anver_off", "ocre_off", "anatomy_off", "verify_off"):
            if not isinstance(getattr(self, name), bool):
                raise ParameterError(f"{name} must be a boolean")

    @property
    def use_anatomy(self):
        return not (self.anver_off or self.anatomy_off)

    @property
    def use_verifier(self):
        return not (self.anver_off or self.verify_off)

    def lr_scales(self):
        scales = {p: self.query_lr_scale for p in QUERY_PREFIXES}
        scales.update({"anat.": self.anatomy_lr_scale, "ver.": self.verifier_lr_scale, "head.": self.head_lr_scale})
        return scales

    def loss_weights(self):
        return LossWeights(self.w_uni, self.w_con, self.w_sep, self.w_seg, self.w_weak, self.eps)

    def candidate_config(self):
        return CandidateConfig(self.quantile, self.min_voxels, self.max_fraction, self.connectivity)

    def octree_config(self):
        return OctreeConfig(self.margin, self.min_block, self.activity_threshold, None if self.max_depth < 0 else self.max_depth)

    @classmethod
    def from_dict(cls, values: dict):
        known = {f.name: f for f in fields(cls)}
        flat = {}
        for key, value in values.items():
            if isinstance(value, dict):  # TOML tables only group keys
                for k, v in value.items():
                    flat[k] = v
            else:
                flat[key] = value
        unknown = sorted(set(flat) - set(known))
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        kinds = {"int": int, "float": float, "bool": bool, "str": str}
        for k, v in flat.items():
            kind = kinds[known[k].type]
            if kind is float and isinstance(v, int) and not isinstance(v, bool):
                v = flat[k] = float(v)
            if not isinstance(v, kind) or (kind is not bool and isinstance(v, bool)):
                raise ParameterError(f"config key {k} must be of type {known[k].type}, got {v!r}")
        return cls(**flat)

    @classmethod
    def from_toml(cls, text: str):
        import tomli

        try:
            values = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ParameterError(f"config is not valid TOML: {e}") from e
        return cls.from_dict(values)

    def to_dict(self):
        return asdict(self)


def init_params(cfg: PipelineConfig) -> ParamStore:
    """Fresh parameters; the draw order is fixed so a seed fixes every tensor."""
    rng = np.random.default_rng(cfg.seed)
    store = ParamStore()
    init_graph_params(store, rng, cfg.d, cfg.d_r, cfg.n_layers, cfg.n_queries, cfg.channels)
    init_anatomy_params(store, rng, cfg.n_organs, cfg.organ_embed_dim, cfg.channels)
    init_verifier_params(store, rng, cfg.d, cfg.channels)
    init_head_params(store, rng, cfg.channels)
    return store


# -- case preparation -----------------------------------------------------------

@dataclass
class PreparedCase:
    case_id: str
    report: object
    dims: tuple
    spacing: tuple
    voxel_volume: float
    ct_flat: np.ndarray
    hu: torch.Tensor  # (nx, ny, nz)
    features: torch.Tensor  # (nx, ny, nz, C)
    soft_maps: torch.Tensor  # (n_organs, nx, ny, nz)
    organ_masks: dict  # organ id -> bool tensor
    lesion_masks: list | None = None
    has_mask: bool = False

    @property
    def n_lesions(self):
        return self.report.n_lesions


def prepare_case(ct, organ_masks: dict, report, cfg: PipelineConfig, lesion_masks=None, has_mask=None, case_id=None):
    """Cache everything about a case that does not depend on parameters."""
    dims = ct.dims
    for oid, m in organ_masks.items():
        if m.dims != dims:
            raise GroundingError(f"organ mask {oid} has shape {m.dims}, CT has {dims}")
        if not 0 <= oid < cfg.n_organs:
            raise ParameterError(f"organ id {oid} outside the anatomy table of {cfg.n_organs}")
    for rec in report.lesions:
        if rec.organ_id not in organ_masks:
            raise GroundingError(f"lesion {rec.lesion_id} references organ {rec.organ_id} without a mask")
    soft = np.zeros((cfg.n_organs,) + tuple(dims))
    for oid, m in organ_masks.items():
        soft[oid] = gaussian_smooth(m, cfg.organ_sigma).scalar()
    if lesion_masks is not None:
        if len(lesion_masks) != report.n_lesions:
            raise GroundingError(f"{len(lesion_masks)} lesion masks for {report.n_lesions} report lesions")
        lesion_masks = [torch.as_tensor(np.asarray(m.data, dtype=np.float64)) for m in lesion_masks]
    hu = ct.scalar().astype(np.float64)
    return PreparedCase(
        case_id=case_id or report.case_id,
        report=report,
        dims=tuple(dims),
        spacing=tuple(ct.spacing),
        voxel_volume=ct.voxel_volume,
        ct_flat=hu.ravel(),
        hu=torch.as_tensor(hu),
        features=torch.as_tensor(feature_bank(ct).data.astype(np.float64)),
        soft_maps=torch.as_tensor(soft),
        organ_masks={oid: torch.as_tensor(np.asarray(m.data, dtype=np.float64)) for oid, m in organ_masks.items()},
        lesion_masks=lesion_masks,
        has_mask=bool(lesion_masks is not None if has_mask is None else has_mask and lesion_masks is not None),
    )


def prepare_phantom(case, cfg: PipelineConfig):
    return prepare_case(case.ct, case.organ_masks, case.report, cfg, case.lesion_masks, case.has_mask, case.spec.case_id)


# -- forward pass ---------------------------------------------------------------

@dataclass
class LesionGrounding:
    lesion_id: int
    soft_mask: torch.Tensor  # full volume, values in [0, 1]
    proposal: Proposal
    candidates: list
    selected: int
    scores: torch.Tensor | None = None
    fallback: bool = False
    response: torch.Tensor | None = None

    def binary(self, threshold=0.5):
        return self.soft_mask.detach().numpy() >= threshold


@dataclass
class GroundingResult:
    case_id: str
    lesions: list = field(default_factory=list)
    losses: object = None
    timings: dict = field(default_factory=dict)
    seg_evaluated: bool = False

    def union(self, dims, threshold=0.5):
        out = np.zeros(dims, dtype=bool)
        for les in self.lesions:
            out |= les.binary(threshold)
        return out

    def proposals_jsonl(self):
        import json

        rows = []
        for les in self.lesions:
            for k, prop in enumerate(les.candidates):
                row = prop.to_json(selected=k == les.selected)
                row["rank"] = k
                row["fallback"] = les.fallback
                rows.append(json.dumps(row, sort_keys=True))
        return "\n".join(rows) + ("\n" if rows else "")


@contextmanager
def _stage(name, timings):
    t0 = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except GroundingError as e:
        raise StageError(name, e) from e
    except (ValueError, RuntimeError, IndexError) as e:
        raise StageError(name, e) from e
    finally:
        timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0


def _fallback_proposal(case: PreparedCase, organ_id, lesion_id):
    """3x3x3 seed at the maximum of the organ's soft map."""
    soft = case.soft_maps[organ_id].numpy()
    centre = np.unravel_index(int(np.argmax(soft)), soft.shape)
    lo = [max(0, c - 1) for c in centre]
    hi = [min(n, c + 2) for c, n in zip(centre, soft.shape)]
    grid = np.zeros(soft.shape, dtype=bool)
    grid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    voxels = np.flatnonzero(grid)
    return Proposal(lesion_id, voxels, BBox3(tuple(lo), tuple(hi)), float("nan"))


def _lesion_summaries(case: PreparedCase, params, cfg: PipelineConfig):
    doc = case.report
    if cfg.lequ_off:
        return [direct_text_summary(doc, i, cfg.d, cfg.embed_seed) for i in range(doc.n_lesions)]
    g = build_graph(doc)
    h = encode_graph(g, params, cfg.embed_seed)
    return [h[node] for node in g.lesion_nodes]


def forward(case: PreparedCase, params, cfg: PipelineConfig, with_losses=False):
    """Ground every lesion of a prepared case.

    With ``with_losses`` the loss terms are assembled with autograd enabled;
    the selection surrogate gives the response maps a gradient while leaving
    mask values untouched.
    """
    timings = {}
    result = GroundingResult(case.case_id, timings=timings)
    doc = case.report
    if doc.n_lesions == 0:
        return result
    nx, ny, nz = case.dims
    with _stage("queries", timings):
        summaries = _lesion_summaries(case, params, cfg)
        queries = [project_queries(querybank(z, params), params) for z in summaries]
    with _stage("anatomy", timings):
        feats = modulated_features(case.features, case.soft_maps, params) if cfg.use_anatomy else case.features
        feats_flat = feats.reshape(-1, cfg.channels)
    score_sets, scored, masks, st_masks = [], [], [], []
    for i, rec in enumerate(doc.lesions):
        with _stage("response", timings):
            resp = response_map(queries[i], feats)
        with _stage("proposal", timings):
            resp_np = resp.detach().numpy()
            cands = generate_candidates(resp_np, cfg.k_p, cfg.candidate_config(), rec.lesion_id)
        fallback = not cands
        scores = None
        with _stage("verify", timings):
            if fallback:
                cands = [_fallback_proposal(case, rec.organ_id, rec.lesion_id)]
                selected = 0
            elif cfg.use_verifier:
                soft_organ = case.soft_maps[rec.organ_id].numpy().ravel()
                scores, selected = verify(cands, summaries[i], feats_flat, soft_organ, case.ct_flat, case.voxel_volume, rec, params, cfg.eps)
                score_sets.append(scores)
                for prop, p in zip(cands, soft_assignments(scores.detach(), cfg.tau)):
                    prop.soft_assign = float(p)
                scored.append((i, cands))
            else:
                selected = 0
        prop = cands[selected]
        with _stage("refine", timings):
            if cfg.ocre_off:
                mask = candidate_indicator(prop.voxels, case.dims, feats.dtype)
            else:
                tree = build_octree(prop.bbox, case.dims, cfg.octree_config())
                mask = refine_full(prop.voxels, feats, params, tree, cfg.activity_threshold)
        result.lesions.append(LesionGrounding(rec.lesion_id, mask, prop, cands, selected, scores, fallback, resp))
        if with_losses:
            if cfg.surrogate == "sigmoid":
                surrogate = torch.sigmoid(cfg.kappa * (resp - float(np.quantile(resp_np, cfg.quantile))))
            else:
                surrogate = resp
            masks.append(mask)
            st_masks.append(mask + (surrogate - surrogate.detach()))
    if with_losses:
        with _stage("loss", timings):
            result.losses = case_losses(case, masks, score_sets, cfg, result, st_masks, scored)
    return result


def _candidate_terms(case: PreparedCase, i, cands, cfg: PipelineConfig):
    """Constant per-candidate losses of each candidate's indicator mask."""
    rec = case.report.lesions[i]
    out = {"attr": [], "org": [], "seg": []}
    with torch.no_grad():
        for prop in cands:
            m = candidate_indicator(prop.voxels, case.dims)
            out["attr"].append(attr_loss([predicted_stats(m, case.hu, case.voxel_volume, cfg.eps)], [(rec.reported_volume_mm3, rec.reported_mean_hu)], cfg.eps))
            out["org"].append(org_loss(m, case.organ_masks[rec.organ_id], cfg.eps))
            if case.has_mask:
                out["seg"].append(seg_loss(m, case.lesion_masks[i]))
    return {k: torch.stack(v) for k, v in out.items() if v}


def case_losses(case: PreparedCase, masks, score_sets, cfg: PipelineConfig, result=None, seg_masks=None, scored=()):
    """Loss terms of one grounded case.

    Weak terms use the refined masks; the supervised term uses ``seg_masks``
    (same values, plus the selection surrogate's gradient) when given.  Each
    verified lesion also contributes the soft-assignment-weighted losses of
    its candidates' indicator masks, which is what teaches the verifier.
    """
    doc = case.report
    zero = torch.zeros((), dtype=torch.float64)
    seg_masks = masks if seg_masks is None else seg_masks
    uni, assigns = unimodality_loss(score_sets, cfg.tau, cfg.eps)
    stats = [predicted_stats(m, case.hu, case.voxel_volume, cfg.eps) for m in masks]
    refs = [(r.reported_volume_mm3, r.reported_mean_hu) for r in doc.lesions]
    attr = attr_loss(stats, refs, cfg.eps)
    org = sum((org_loss(m, case.organ_masks[r.organ_id], cfg.eps) for m, r in zip(masks, doc.lesions)), zero)
    delta = int(case.has_mask)
    seg = sum((seg_loss(m, g) for m, g in zip(seg_masks, case.lesion_masks)), zero) if delta else zero
    for p, (i, cands) in zip(assigns, scored):
        cand = _candidate_terms(case, i, cands, cfg)
        attr = attr + (p * cand["attr"]).sum()
        org = org + (p * cand["org"]).sum()
        if delta:
            seg = seg + (p * cand["seg"]).sum()
    terms = {"uni": uni, "attr": attr, "org": org, "sep": sep_loss(masks, cfg.eps)}
    if delta:
        terms["seg"] = seg / len(masks)
        if result is not None:
            result.seg_evaluated = True
    return total_loss(terms, delta, cfg.loss_weights())


@torch.no_grad()
def ground(case: PreparedCase, params, cfg: PipelineConfig) -> GroundingResult:
    return forward(case, params, cfg, with_losses=False)


# -- evaluation -----------------------------------------------------------------

def evaluate(cases, params, cfg: PipelineConfig):
    """Per-case metric records plus their aggregate."""
    records = []
    for case in cases:
        res = ground(case, params, cfg)
        pred = res.union(case.dims, cfg.binarize)
        gt = np.zeros(case.dims, dtype=bool)
        for m in case.lesion_masks or []:
            gt |= m.numpy() > 0.5
        rec = metrics.evaluate_case(pred, gt, case.spacing, cfg.connectivity, cfg.d0)
        rec["case_id"] = case.case_id
        records.append(rec)
    return records, metrics.aggregate(records)


def split_cases(cases, ratios=(8, 1, 1)):
    """Train/val/test split ordered by case id; every part gets at least one case when possible."""
    ordered = sorted(cases, key=lambda c: c.case_id)
    n = len(ordered)
    total = sum(ratios)
    n_train = max(1, round(n * ratios[0] / total)) if n else 0
    n_val = round(n * ratios[1] / total)
    if n - n_train >= 2:
        n_val = max(1, n_val)
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return ordered[:n_train], ordered[n_train : n_train + n_val], ordered[n_train + n_val :]


# -- training -------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ParamStore
    trace: list  # per-step loss rows
    evals: list  # {"step", "lr", "lls", "dice", "hd95"}
    seg_calls: int = 0


def _eval_row(step, cases, params, cfg):
    _, agg = evaluate(cases, params, cfg)
    return {"step": step, **{k: agg[k]["mean"] for k in ("lr", "lls", "dice", "hd95")}}


def train(cases, cfg: PipelineConfig, steps: int, eval_cases=None, params=None, callback=None) -> TrainResult:
    """Batch-1 AdamW training over ``cases`` (visited in a seeded shuffled order).

    ``eval_cases`` are scored before the first step, every ``cfg.eval_every``
    steps and after the last.  A non-finite loss raises :class:`NumericError`
    carrying the last good parameters as ``last_good``.
    """
    if not cases:
        raise ParameterError("training needs at least one case")
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    params = init_params(cfg) if params is None else params.detached()
    rng = np.random.default_rng([cfg.seed, 1])
    scales = cfg.lr_scales()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay, lr_scales=scales)
    names = list(params)
    trace, evals, seg_calls = [], [], 0
    if eval_cases:
        evals.append(_eval_row(0, eval_cases, params, cfg))
    order = []
    for step in range(steps):
        if not order:
            order = list(rng.permutation(len(cases)))
        case = cases[order.pop(0)]
        params.requires_grad_(True)
        res = forward(case, params, cfg, with_losses=True)
        if res.losses is None:  # a case without lesions carries no signal
            params.requires_grad_(False)
            continue
        seg_calls += int(res.seg_evaluated)
        loss = res.losses.total_tensor
        value = float(loss.detach())
        if not math.isfinite(value):
            params.requires_grad_(False)
            err = NumericError(f"non-finite loss {value} at step {step} on case {case.case_id}")
            err.last_good = params.detached()
            raise err
        grads = torch.autograd.grad(loss, [params[k] for k in names], allow_unused=True)
        params.requires_grad_(False)
        grads = {k: g for k, g in zip(names, grads) if g is not None}
        norm = clip_grad_norm(grads, cfg.max_grad_norm or None)
        step_lr = cosine_lr(step, steps, cfg.lr)
        opt.step(grads, step_lr)
        row = {"step": step, "case_id": case.case_id, **res.losses.as_row(), "learning_rate": step_lr, "grad_norm": norm}
        trace.append(row)
        if callback is not None:
            callback(row)
        if eval_cases and ((step + 1) % cfg.eval_every == 0 or step + 1 == steps):
            if not evals or evals[-1]["step"] != step + 1:
                evals.append(_eval_row(step + 1, eval_cases, params, cfg))
    return TrainResult(params, trace, evals, seg_calls)


def with_ablation(cfg: PipelineConfig, **flags):
    return replace(cfg, **flags)
