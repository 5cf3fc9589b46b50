"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import GroundingError, NumericError, ParameterError
from .params import load_checkpoint, save_checkpoint

log = logging.getLogger("lesionground")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def load_config(path):
    from .pipeline import PipelineConfig

    if path is None:
        return PipelineConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ParameterError(f"cannot read config {path}: {e}") from e
    return PipelineConfig.from_toml(text)


def write_pgm(path, image):
    """8-bit binary PGM of a 2-D array, min-max scaled."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    # rows are y, columns are x
    pixels = pixels.T
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def _axial_slices(response, which):
    nz = response.shape[2]
    if which == "all":
        return list(range(nz))
    peak = np.unravel_index(int(np.argmax(response)), response.shape)
    return [int(peak[2])]


def cmd_phantom_gen(args):
    from .phantom import suite, write_suite

    specs = suite(args.suite, seed=args.seed, mask_ratio=args.mask_ratio, size=args.size)
    manifest = write_suite(specs, args.out)
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")
    return EXIT_OK


def _read_case(path):
    from .phantom import read_case

    path = Path(path)
    if not (path / "case.json").is_file():
        raise GroundingError(f"{path} is not a case directory (missing case.json)")
    return read_case(path)


def cmd_ground(args):
    from .pipeline import ground, init_params, prepare_phantom
    from .volume import Mask3, write_mask

    cfg = load_config(args.config)
    case = _read_case(args.case)
    params = load_checkpoint(args.params) if args.params else init_params(cfg)
    prepared = prepare_phantom(case, cfg)
    result = ground(prepared, params, cfg)
    out = Path(args.out)
    (out / "slices").mkdir(parents=True, exist_ok=True)
    spacing = prepared.spacing
    for les in result.lesions:
        write_mask(out / f"lesion_{les.lesion_id}.mask", Mask3(les.binary(cfg.binarize), spacing))
        if les.response is not None:
            resp = les.response.detach().numpy()
            for z in _axial_slices(resp, args.slices):
                write_pgm(out / "slices" / f"response_l{les.lesion_id}_z{z:03d}.pgm", resp[:, :, z])
    write_mask(out / "pred.mask", Mask3(result.union(prepared.dims, cfg.binarize), spacing))
    (out / "proposals.jsonl").write_text(result.proposals_jsonl(), encoding="utf-8")
    summary = {"case_id": result.case_id, "n_lesions": len(result.lesions), "timings": result.timings}
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")
    print(f"grounded {len(result.lesions)} lesions of {result.case_id} into {out}")
    return EXIT_OK


def _read_suite(path):
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise GroundingError(f"{path} has no manifest.json; generate it with 'phantom gen'")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    return [_read_case(path / c["dir"]) for c in manifest["cases"]]


def cmd_train(args):
    from .pipeline import prepare_phantom, split_cases, train

    cfg = load_config(args.config)
    cases = [prepare_phantom(c, cfg) for c in _read_suite(args.suite)]
    tr, va, te = split_cases(cases)
    eval_cases = [c for c in va + te if c.lesion_masks is not None] or None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")

    try:
        result = train(tr, cfg, args.steps, eval_cases=eval_cases, callback=lambda row: log.info("step %d total %.5g", row["step"], row["total"]))
    except NumericError as e:
        last_good = getattr(e, "last_good", None)
        if last_good is not None:
            save_checkpoint(out.with_suffix(".last_good.ckpt"), last_good)
        raise
    save_checkpoint(out, result.params)
    if result.trace:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(result.trace[0]))
            writer.writeheader()
            writer.writerows(result.trace)
    if result.evals:
        out.with_suffix(".evals.json").write_text(json.dumps(result.evals, indent=2), encoding="utf-8")
        last = result.evals[-1]
        print(f"step {last['step']}: LR {last['lr']:.3f} LLS {last['lls']:.3f}")
    print(f"saved parameters to {out}")
    return EXIT_OK


def _mask_pairs(pred_dir, gt_dir):
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if (pred_dir / "pred.mask").is_file():
        return [(pred_dir.name, pred_dir / "pred.mask", gt_dir / "gt.mask")]
    pairs = []
    for sub in sorted(p for p in pred_dir.iterdir() if (p / "pred.mask").is_file()):
        pairs.append((sub.name, sub / "pred.mask", gt_dir / sub.name / "gt.mask"))
    if not pairs:
        raise GroundingError(f"no pred.mask found under {pred_dir}")
    return pairs


def cmd_eval(args):
    from . import metrics
    from .volume import read_mask

    records = []
    for name, pred_path, gt_path in _mask_pairs(args.pred, args.gt):
        if not gt_path.is_file():
            raise GroundingError(f"missing ground truth {gt_path}")
        pred, gt = read_mask(pred_path), read_mask(gt_path)
        rec = metrics.evaluate_case(pred.data, gt.data, gt.spacing, args.connectivity, args.d0)
        rec["case_id"] = name
        records.append(rec)
    report = {"cases": records, "aggregate": metrics.aggregate(records)}
    Path(args.report_json).write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    agg = report["aggregate"]
    print(" ".join(f"{k}={agg[k]['mean']:.4f}" for k in ("dice", "hd95", "lr", "lls") if agg[k]["mean"] is not None))
    return EXIT_OK


def cmd_selftest(args):
    from . import selftest

    ok, results = selftest.run(quick=not args.full)
    print(json.dumps(results, indent=2, default=float))
    print("selftest " + ("passed" if ok else "FAILED"))
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    p = argparse.ArgumentParser(prog="lesionground", description="Report-guided 3D lesion grounding on synthetic CT.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic cases")
    ph_sub = ph.add_subparsers(dest="phantom_command", required=True)
    gen = ph_sub.add_parser("gen", help="write a phantom suite")
    gen.add_argument("--suite", required=True, choices=("easy", "multi", "small", "weak"))
    gen.add_argument("--out", required=True)
    gen.add_argument("--mask-ratio", type=float, default=0.25)
    gen.add_argument("--seed", type=int, default=2026)
    gen.add_argument("--size", type=int, default=10)
    gen.set_defaults(func=cmd_phantom_gen)

    gr = sub.add_parser("ground", help="ground one case")
    gr.add_argument("--case", required=True)
    gr.add_argument("--params", help="checkpoint; untrained parameters when omitted")
    gr.add_argument("--config")
    gr.add_argument("--out", required=True)
    gr.add_argument("--slices", choices=("peak", "all"), default="peak", help="axial response slices to dump")
    gr.set_defaults(func=cmd_ground)

    tr = sub.add_parser("train", help="train on a phantom suite directory")
    tr.add_argument("--suite", required=True)
    tr.add_argument("--steps", type=int, required=True)
    tr.add_argument("--config")
    tr.add_argument("--out", required=True)
    tr.add_argument("--loss-csv")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score predicted masks against ground truth")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--report-json", required=True)
    ev.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    ev.add_argument("--d0", type=float, default=20.0)
    ev.set_defaults(func=cmd_eval)

    st = sub.add_parser("selftest", help="gradient checks and oracle suites")
    st.add_argument("--full", action="store_true", help="full-size suites")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ParameterError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except GroundingError as e:
        print(f"error: {e}", file=sys.stderr)
        return getattr(e, "exit_code", EXIT_DATA)
    except (OSError, ValueError, KeyError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
