"""Command-line entry point: ``volflow <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .checkpoint import load_checkpoint
from .experiment import ExperimentConfig, run
from .flow import FlowConfig, Glow3D
from .patching import GridSpec
from .pipeline import (
    calibrate,
    config_from_values,
    load_calibration,
    lung_patch_scores,
    run_patient,
    save_calibration,
    score_volume,
    write_logp_map,
)
from .preprocess import PreprocessConfig, preprocess
from .training import ArraySource, PatchSource, TrainConfig, coerce_fields, parse_key_values, train
from .volume import SynthSpec, ValueSpace, generate_synthetic, read_mask, read_volume, write_mask, write_volume

log = logging.getLogger("volflow")

MASK_SUFFIX = ".mask.rvol"


def _data_files(directory: Path):
    """``(volume path, mask path or None)`` for every non-mask ``.rvol`` in ``directory``."""
    out = []
    for p in sorted(directory.glob("*.rvol")):
        if p.name.endswith(MASK_SUFFIX):
            continue
        mask = p.with_name(p.name[: -len(".rvol")] + MASK_SUFFIX)
        out.append((p, mask if mask.exists() else None))
    if not out:
        raise SystemExit(f"no .rvol files in {directory}")
    return out


def _normalized(path):
    v = read_volume(path)
    if v.value_space != ValueSpace.NORMALIZED:
        raise SystemExit(f"{path}: expected a preprocessed (normalized) volume; run `volflow preprocess` first")
    return v


def cmd_synth(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = SynthSpec(dims=(args.dim,) * 3, spacing=(args.spacing,) * 3, seed=args.seed + i,
                         lesion_count=args.lesions, lesion_radius_mm=args.lesion_radius_mm)
        hu, lung, lesions = generate_synthetic(spec)
        write_volume(hu, out / f"synth{i:03d}.rvol")
        write_mask(lung, out / f"synth{i:03d}.lung.rvol")
        if args.lesions:
            write_mask(lesions, out / f"synth{i:03d}.lesions.rvol")
    log.info("wrote %d synthetic volumes to %s", args.count, out)


def cmd_preprocess(args):
    cfg = PreprocessConfig(target_spacing_mm=args.spacing, hu_min=args.hu_min, hu_max=args.hu_max)
    mask = read_mask(args.mask_in) if args.mask_in else None
    vol, m = preprocess(read_volume(args.inp), cfg, mask)
    write_volume(vol, args.out)
    if args.mask_out:
        write_mask(m, args.mask_out)


def cmd_train(args):
    values = parse_key_values(Path(args.config).read_text())
    tcfg = TrainConfig(**coerce_fields(TrainConfig, values, strict=False))
    fcfg = FlowConfig(**coerce_fields(FlowConfig, values, strict=False))
    edge = fcfg.patch_edge
    pairs, patches = [], []
    for vpath, mpath in _data_files(Path(args.data)):
        v = _normalized(vpath)
        if mpath is not None:
            pairs.append((v, read_mask(mpath)))
        elif v.dims == (edge,) * 3:
            patches.append(v.voxels)
        else:
            raise SystemExit(f"{vpath}: no {MASK_SUFFIX} partner and not a {edge}^3 patch")
    if pairs and patches:
        raise SystemExit("mixing whole volumes and loose patches in one data directory is not supported")
    source = PatchSource(pairs, edge, tcfg.min_mask_fraction) if pairs else ArraySource(np.stack(patches))
    model = Glow3D(fcfg, seed=tcfg.seed)
    log_csv = Path(args.out).with_suffix(".log.csv")
    state = train(model, source, tcfg, args.out, log_csv)
    log.info("trained %d steps; final bits/dim %s; log %s", state.step,
             state.history[-1] if state.history else "n/a", log_csv)


def cmd_calibrate(args):
    model = load_checkpoint(args.model).double()
    values = parse_key_values(Path(args.config).read_text()) if args.config else {}
    grid = GridSpec(model.cfg.patch_edge, int(values.get("overlap", 10)))
    pool = []
    for vpath, mpath in _data_files(Path(args.data)):
        if mpath is None:
            raise SystemExit(f"{vpath}: calibration needs a lung mask ({MASK_SUFFIX})")
        mask = read_mask(mpath)
        scores = score_volume(_normalized(vpath), mask, model, grid, workers=args.workers)
        pool += lung_patch_scores(scores, mask, grid.patch_edge)
    save_calibration(calibrate(pool), args.out)
    log.info("calibration from %d patches written to %s", len(pool), args.out)


def cmd_score(args):
    model = load_checkpoint(args.model).double()
    values = parse_key_values(Path(args.config).read_text())
    cfg = config_from_values(values, load_calibration(args.calibration))
    if cfg.grid.patch_edge != model.cfg.patch_edge:
        cfg = replace(cfg, grid=GridSpec(model.cfg.patch_edge, cfg.grid.overlap))
    vol = _normalized(args.volume)
    result, logp = run_patient(vol, read_mask(args.mask), model, cfg, workers=args.workers)
    if args.out_map:
        write_logp_map(logp, vol.spacing, args.out_map)
        result.logp_map_path = str(args.out_map)
    Path(args.out_json).write_text(json.dumps(result.to_json(include_scores=args.include_scores), indent=1))
    print(f"{result.label.value}\t{result.anomaly_volume_cm3:.3f} cm^3")


def cmd_evaluate(args):
    scores = ev.read_scores_csv(args.scores)
    try:
        chosen = float(args.threshold_from)
    except ValueError:
        chosen = ev.select_threshold(ev.read_scores_csv(args.threshold_from))
    m = ev.evaluate(scores, chosen)
    ev.write_metrics_json(m, args.out)
    if args.roc_csv:
        ev.write_roc_csv(m.roc_points, args.roc_csv)
    print(f"AUROC {m.auroc:.4f}  F1 {m.f1:.4f}  ACC {m.accuracy:.4f}  T {m.chosen_T}")


def cmd_e2e(args):
    cfg = ExperimentConfig(seed=args.seed, workers=args.workers)
    if args.iterations is not None:
        cfg = replace(cfg, train=replace(cfg.train, iterations=args.iterations))
    if args.small:
        cfg = replace(cfg, n_train=8, n_val=20, n_val_lesioned=10, n_test=10, n_test_lesioned=5)
    report = run(cfg, args.out)
    print(json.dumps(report, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volflow", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic HU volumes with lung and lesion masks")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--spacing", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--lesions", type=int, default=0)
    s.add_argument("--lesion-radius-mm", type=float, default=10.0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resample and window a HU volume")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mask-in")
    s.add_argument("--mask-out")
    s.add_argument("--spacing", type=float, default=2.0)
    s.add_argument("--hu-min", type=float, default=-1020.0)
    s.add_argument("--hu-max", type=float, default=200.0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="fit the flow on normal data")
    s.add_argument("--data", required=True,
                   help=f"directory of normalized .rvol patches, or volumes with <name>{MASK_SUFFIX} masks")
    s.add_argument("--config", required=True, help="key=value file with TrainConfig and FlowConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("calibrate", help="build the calibration distribution from normal volumes")
    s.add_argument("--data", required=True, help=f"directory of normalized volumes with {MASK_SUFFIX} masks")
    s.add_argument("--model", required=True)
    s.add_argument("--config", help="pipeline key=value file (overlap)")
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("score", help="Log P map and Normal/Abnormal label for one volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--mask", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--calibration", required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out-map")
    s.add_argument("--out-json", required=True)
    s.add_argument("--include-scores", action="store_true")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("evaluate", help="AUROC, F1 and accuracy from a score CSV")
    s.add_argument("--scores", required=True, help="CSV with id,score,label")
    s.add_argument("--threshold-from", required=True, help="validation CSV or a fixed T in cm^3")
    s.add_argument("--out", required=True)
    s.add_argument("--roc-csv")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("e2e-synth", help="full synthetic benchmark into one report directory")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--iterations", type=int)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--small", action="store_true", help="fewer subjects, for smoke runs")
    s.set_defaults(func=cmd_e2e)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"volflow {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
