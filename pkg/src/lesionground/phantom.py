"""Deterministic synthetic CT cases with analytic organs, lesions and reports."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ParameterError, SpecError
from .report import LesionRecord, Organ, ReportDoc, serialize_report
from .volume import Mask3, Volume3, write_mask, write_volume

BACKGROUND_HU = -100.0
NOISE_SIGMA = 5.0

# organ id -> (name, mean HU); the id indexes the anatomy embedding table
ORGANS = {0: ("liver", 60.0), 1: ("kidney", 30.0), 2: ("pancreas", 40.0), 3: ("spleen", 45.0)}
SUITES = ("easy", "multi", "small", "weak")
SUITE_SIZE = 10


@dataclass(frozen=True)
class OrganSpec:
    organ_id: int
    center_mm: tuple
    radii_mm: tuple
    hu: float
    noise_sigma: float = NOISE_SIGMA

    @property
    def name(self):
        return ORGANS[self.organ_id][0]


@dataclass(frozen=True)
class LesionSpec:
    lesion_id: int
    organ_id: int
    center_mm: tuple
    radii_mm: tuple
    hu: float
    margin_mm: float = 3.0
    loc: str = "-"


@dataclass(frozen=True)
class PhantomSpec:
    case_id: str
    dims: tuple
    spacing: tuple
    organs: tuple
    lesions: tuple
    seed: int
    has_mask: bool = True
    min_contrast_hu: float = 10.0


@dataclass
class PhantomCase:
    spec: PhantomSpec
    ct: Volume3
    organ_masks: dict
    lesion_masks: list
    report: ReportDoc
    has_mask: bool = True

    @property
    def spacing(self):
        return self.ct.spacing

    @property
    def dims(self):
        return self.ct.dims

    def gt_union(self):
        out = np.zeros(self.dims, dtype=bool)
        for m in self.lesion_masks:
            out |= m.data
        return Mask3(out, self.spacing)


def voxel_grid_mm(dims, spacing):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(dims, spacing)]
    return np.meshgrid(*axes, indexing="ij")


def ellipsoid_mask(dims, spacing, center_mm, radii_mm, grid=None):
    """Voxels whose centre lies inside the ellipsoid."""
    x, y, z = grid if grid is not None else voxel_grid_mm(dims, spacing)
    q = sum(((c - c0) / r) ** 2 for c, c0, r in zip((x, y, z), center_mm, radii_mm))
    return q <= 1.0


def validate_spec(spec: PhantomSpec):
    organs = {o.organ_id: o for o in spec.organs}
    if len(organs) != len(spec.organs):
        raise SpecError("duplicate organ ids")
    for o in spec.organs:
        if o.organ_id not in ORGANS:
            raise SpecError(f"organ id {o.organ_id} not in the organ table")
        if min(o.radii_mm) <= 0:
            raise SpecError(f"organ {o.organ_id} has non-positive radius")
    ids = [l.lesion_id for l in spec.lesions]
    if ids != list(range(len(ids))):
        raise SpecError("lesion ids must be 0..N-1 in order")
    for les in spec.lesions:
        organ = organs.get(les.organ_id)
        if organ is None:
            raise SpecError(f"lesion {les.lesion_id} references missing organ {les.organ_id}")
        # conservative containment: centre offset plus the largest lesion radius
        offset = math.sqrt(sum(((c - c0) / r) ** 2 for c, c0, r in zip(les.center_mm, organ.center_mm, organ.radii_mm)))
        if offset + max(les.radii_mm) / min(organ.radii_mm) > 1.0:
            raise SpecError(f"lesion {les.lesion_id} is not contained in organ {les.organ_id}")
        if abs(les.hu - organ.hu) < spec.min_contrast_hu:
            raise SpecError(f"lesion {les.lesion_id} contrast below {spec.min_contrast_hu} HU")
    for a in spec.lesions:
        for b in spec.lesions:
            if a.lesion_id < b.lesion_id:
                gap = math.dist(a.center_mm, b.center_mm) - max(a.radii_mm) - max(b.radii_mm)
                if gap < max(a.margin_mm, b.margin_mm):
                    raise SpecError(f"lesions {a.lesion_id} and {b.lesion_id} closer than their margin")


def location_token(lesion_center, organ: OrganSpec):
    vertical = "upper" if lesion_center[2] >= organ.center_mm[2] else "lower"
    side = "lateral" if abs(lesion_center[0] - organ.center_mm[0]) >= organ.radii_mm[0] / 3 else "medial"
    return f"{vertical}-{side}"


def generate(spec: PhantomSpec) -> PhantomCase:
    validate_spec(spec)
    rng = np.random.default_rng(spec.seed)
    grid = voxel_grid_mm(spec.dims, spec.spacing)
    hu = np.full(spec.dims, BACKGROUND_HU)
    sigma = np.full(spec.dims, NOISE_SIGMA)
    organ_masks = {}
    for o in spec.organs:
        m = ellipsoid_mask(spec.dims, spec.spacing, o.center_mm, o.radii_mm, grid)
        hu[m] = o.hu
        sigma[m] = o.noise_sigma
        organ_masks[o.organ_id] = Mask3(m, spec.spacing)
    lesion_masks = []
    voxel_volume = float(np.prod(spec.spacing))
    records = []
    organ_by_id = {o.organ_id: o for o in spec.organs}
    for les in spec.lesions:
        m = ellipsoid_mask(spec.dims, spec.spacing, les.center_mm, les.radii_mm, grid)
        if not m.any():
            raise SpecError(f"lesion {les.lesion_id} rasterises to no voxels")
        if np.any(m & ~organ_masks[les.organ_id].data):
            raise SpecError(f"lesion {les.lesion_id} leaves organ {les.organ_id} after rasterisation")
        hu[m] = les.hu
        lesion_masks.append(Mask3(m, spec.spacing))
        organ = organ_by_id[les.organ_id]
        kind = "hyperdense" if les.hu > organ.hu else "hypodense"
        records.append(
            LesionRecord(
                lesion_id=les.lesion_id,
                organ_id=les.organ_id,
                sub_location=les.loc,
                reported_volume_mm3=int(m.sum()) * voxel_volume,
                reported_mean_hu=float(les.hu),
                raw_text=f"{kind} lesion in the {organ.name}",
            )
        )
    ct = hu + rng.standard_normal(spec.dims) * sigma
    report = ReportDoc(
        spec.case_id,
        {o.organ_id: Organ(o.organ_id, o.name, float(o.hu)) for o in sorted(spec.organs, key=lambda o: o.organ_id)},
        tuple(records),
    )
    return PhantomCase(spec, Volume3(ct.astype(np.float32), spec.spacing), organ_masks, lesion_masks, report, spec.has_mask)


# -- suites -------------------------------------------------------------------

def _place_lesions(rng, organ: OrganSpec, radii_list, others, margin, max_tries=2000):
    """Rejection-sample lesion centres inside ``organ`` respecting margins."""
    placed = []
    for radii in radii_list:
        rmax = max(radii)
        for _ in range(max_tries):
            u = rng.uniform(-1.0, 1.0, 3)
            if np.linalg.norm(u) > 1.0:
                continue
            budget = 1.0 - rmax / min(organ.radii_mm) - 0.05
            if budget <= 0:
                raise SpecError("lesion too large for organ")
            c = tuple(float(c0 + budget * ui * r) for c0, ui, r in zip(organ.center_mm, u, organ.radii_mm))
            if all(math.dist(c, pc) - rmax - pr >= margin for pc, pr in others + placed):
                placed.append((c, rmax))
                break
        else:
            raise SpecError("could not place lesion with the requested margin")
    return [c for c, _ in placed]


def _organ(organ_id, center, radii):
    return OrganSpec(organ_id, tuple(float(c) for c in center), tuple(float(r) for r in radii), ORGANS[organ_id][1])


def easy_spec(seed, dims=(40, 40, 32), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng([seed, 1])
    ext = np.asarray(dims) * np.asarray(spacing)
    liver = _organ(0, ext / 2, (0.36 * ext[0], 0.34 * ext[1], 0.36 * ext[2]))
    r = float(rng.uniform(3.5, 4.5))
    # hyper- and hypodense by seed parity; reported means stay well away from 0 HU
    delta = 60.0 if seed % 2 == 0 else -40.0
    (c,) = _place_lesions(rng, liver, [(r, r, r)], [], 3.0)
    les = LesionSpec(0, 0, c, (r, r, r), liver.hu + delta, loc=location_token(c, liver))
    return PhantomSpec(f"easy-{seed:04d}", tuple(dims), tuple(spacing), (liver,), (les,), seed)


def multi_spec(seed, dims=(64, 48, 40), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng([seed, 2])
    ext = np.asarray(dims) * np.asarray(spacing)
    liver = _organ(0, (0.31 * ext[0], 0.5 * ext[1], 0.5 * ext[2]), (0.27 * ext[0], 0.4 * ext[1], 0.4 * ext[2]))
    spleen = _organ(3, (0.79 * ext[0], 0.5 * ext[1], 0.5 * ext[2]), (0.18 * ext[0], 0.34 * ext[1], 0.36 * ext[2]))
    organs = {0: liver, 3: spleen}
    n = int(rng.integers(2, 5))
    for _ in range(50):
        radii = rng.permutation([2.5, 3.2, 3.9, 4.6])[:n]
        deltas = rng.permutation([-30.0, -20.0, 35.0, 60.0])[:n]
        hosts = rng.permutation([0, 3] + [0] * (n - 3) + [3] * min(1, n - 2))[:n]
        placed, lesions = [], []
        try:
            for lid, (r, dhu, oid) in enumerate(zip(radii, deltas, hosts)):
                organ = organs[int(oid)]
                (c,) = _place_lesions(rng, organ, [(r, r, r)], placed, 4.0, max_tries=500)
                placed.append((c, float(r)))
                lesions.append(
                    LesionSpec(lid, int(oid), c, (float(r),) * 3, organ.hu + float(dhu), margin_mm=4.0, loc=location_token(c, organ))
                )
        except SpecError:
            continue
        return PhantomSpec(f"multi-{seed:04d}", tuple(dims), tuple(spacing), (liver, spleen), tuple(lesions), seed)
    raise SpecError(f"could not lay out multi-lesion case for seed {seed}")


def small_spec(seed, dims=(40, 40, 32), spacing=(1.0, 1.0, 1.0)):
    rng = np.random.default_rng([seed, 3])
    ext = np.asarray(dims) * np.asarray(spacing)
    liver = _organ(0, ext / 2, (0.36 * ext[0], 0.34 * ext[1], 0.36 * ext[2]))
    sign = 1.0 if seed % 2 == 0 else -1.0
    grid = voxel_grid_mm(dims, spacing)
    for _ in range(200):
        r = float(rng.uniform(1.45, 1.85))
        (c,) = _place_lesions(rng, liver, [(r, r, r)], [], 3.0)
        count = int(ellipsoid_mask(dims, spacing, c, (r, r, r), grid).sum())
        if 8 <= count <= 27:
            break
    else:
        raise SpecError("could not draw a small lesion of 8-27 voxels")
    les = LesionSpec(0, 0, c, (r, r, r), liver.hu + sign * 15.0, loc=location_token(c, liver))
    return PhantomSpec(f"small-{seed:04d}", tuple(dims), tuple(spacing), (liver,), (les,), seed)


def suite(name, seed=2026, mask_ratio=0.25, size=SUITE_SIZE):
    """Specs of a named suite; ``mask_ratio`` only affects ``weak``."""
    makers = {"easy": easy_spec, "multi": multi_spec, "small": small_spec, "weak": multi_spec}
    if name not in makers:
        raise ParameterError(f"unknown suite {name!r}; expected one of {SUITES}")
    specs = [makers[name](seed + k) for k in range(size)]
    if name == "weak":
        if not 0.0 <= mask_ratio <= 1.0:
            raise ParameterError(f"mask ratio must be in [0, 1], got {mask_ratio}")
        n_mask = math.ceil(mask_ratio * size)
        specs = [replace(s, case_id=s.case_id.replace("multi", "weak"), has_mask=k < n_mask) for k, s in enumerate(specs)]
    for s in specs:
        validate_spec(s)
    return specs


# -- files ----------------------------------------------------------------------

def write_case(case: PhantomCase, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_volume(out / "ct.vol", case.ct)
    files = {"ct": "ct.vol", "report": "report.txt", "organs": {}, "lesions": [], "gt": "gt.mask"}
    for oid, m in case.organ_masks.items():
        name = f"organ_{oid}.mask"
        write_mask(out / name, m)
        files["organs"][str(oid)] = name
    for i, m in enumerate(case.lesion_masks):
        name = f"gt_lesion_{i}.mask"
        write_mask(out / name, m)
        files["lesions"].append(name)
    write_mask(out / "gt.mask", case.gt_union())
    (out / "report.txt").write_text(serialize_report(case.report), encoding="utf-8")
    meta = {"case_id": case.spec.case_id, "has_mask": case.has_mask, "files": files, "spec": asdict(case.spec)}
    (out / "case.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return meta


def write_suite(specs, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cases = []
    for spec in specs:
        meta = write_case(generate(spec), out / spec.case_id)
        cases.append({"case_id": spec.case_id, "dir": spec.case_id, "has_mask": meta["has_mask"], "seed": spec.seed})
    manifest = {"cases": cases}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest


def _tuple_spec(d):
    organs = tuple(OrganSpec(o["organ_id"], tuple(o["center_mm"]), tuple(o["radii_mm"]), o["hu"], o["noise_sigma"]) for o in d["organs"])
    lesions = tuple(
        LesionSpec(l["lesion_id"], l["organ_id"], tuple(l["center_mm"]), tuple(l["radii_mm"]), l["hu"], l["margin_mm"], l["loc"])
        for l in d["lesions"]
    )
    return PhantomSpec(d["case_id"], tuple(d["dims"]), tuple(d["spacing"]), organs, lesions, d["seed"], d["has_mask"], d["min_contrast_hu"])


def read_case(case_dir) -> PhantomCase:
    """Load a case written by :func:`write_case`."""
    from .report import parse_report
    from .volume import read_mask, read_volume

    case_dir = Path(case_dir)
    meta = json.loads((case_dir / "case.json").read_text(encoding="utf-8"))
    files = meta["files"]
    ct = read_volume(case_dir / files["ct"])
    organs = {int(k): read_mask(case_dir / v) for k, v in files["organs"].items()}
    lesions = [read_mask(case_dir / f) for f in files["lesions"]]
    report = parse_report((case_dir / files["report"]).read_text(encoding="utf-8"))
    spec = _tuple_spec(meta["spec"])
    return PhantomCase(spec, ct, organs, lesions, report, bool(meta["has_mask"]))


__all__ = [
    "OrganSpec",
    "LesionSpec",
    "PhantomSpec",
    "PhantomCase",
    "generate",
    "suite",
    "write_case",
    "write_suite",
    "read_case",
]
