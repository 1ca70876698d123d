"""Synthetic end-to-end experiment: generate, preprocess, train, calibrate, score, evaluate."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import evaluation as ev
from .flow import FlowConfig, Glow3D
from .patching import GridSpec, extract, mask_coverage
from .pipeline import (
    PipelineConfig,
    aggregate_map,
    anomaly_volume,
    binarize,
    calibrate,
    classify,
    config_to_text,
    filter_components,
    lung_patch_scores,
    save_calibration,
    score_volume,
)
from .preprocess import PreprocessConfig, preprocess
from .training import PatchSource, TrainConfig, nll_loss, train
from .volume import SynthSpec, generate_synthetic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dims: int = 64
    spacing_mm: float = 2.0
    n_train: int = 40
    n_val: int = 20
    n_val_lesioned: int = 10
    n_test: int = 20
    n_test_lesioned: int = 10
    lesion_count: int = 2
    lesion_radius_mm: tuple[float, float] = (8.0, 12.0)
    lesion_shift_hu: float = 300.0
    texture_smoothness: float = 1.5
    flow: FlowConfig = FlowConfig(levels=2, flows_per_level=4, patch_edge=16, coupling_hidden=32)
    train: TrainConfig = TrainConfig(iterations=2000, batch_size=10, lr=1e-4, weight_decay=1e-5)
    overlap: int = 10
    n_eval_patches: int = 200
    workers: int = 1


@dataclass
class Subject:
    subject: str
    label: int
    volume: object
    mask: object
    lesions: object


def make_subjects(cfg: ExperimentConfig, split: str, n: int, n_lesioned: int, base_seed: int):
    rng = np.random.default_rng([cfg.seed, base_seed])
    out = []
    for i in range(n):
        lesioned = i >= n - n_lesioned
        radius = float(rng.uniform(*cfg.lesion_radius_mm)) if lesioned else cfg.lesion_radius_mm[0]
        spec = SynthSpec(
            dims=(cfg.dims,) * 3,
            spacing=(cfg.spacing_mm,) * 3,
            seed=int(rng.integers(2**63)),
            texture_smoothness=cfg.texture_smoothness,
            lesion_count=cfg.lesion_count if lesioned else 0,
            lesion_radius_mm=radius,
            lesion_intensity_shift=cfg.lesion_shift_hu,
        )
        hu, lung, lesions = generate_synthetic(spec)
        vol, mask = preprocess(hu, PreprocessConfig(), mask=lung)
        out.append(Subject(f"{split}-{i:03d}", int(lesioned), vol, mask, lesions))
    return out


@torch.no_grad()
def _mean_bpd(model: Glow3D, patches: np.ndarray) -> float:
    x = torch.from_numpy(patches).to(next(model.parameters()).dtype)
    return float(nll_loss(model, x))


def run(cfg: ExperimentConfig, out_dir) -> dict:
    """Run the whole synthetic benchmark and write a report directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    torch.manual_seed(cfg.seed)
    edge = cfg.flow.patch_edge
    grid = GridSpec(edge, cfg.overlap)

    log.info("generating synthetic subjects")
    train_set = make_subjects(cfg, "train", cfg.n_train, 0, 1)
    val_set = make_subjects(cfg, "val", cfg.n_val, cfg.n_val_lesioned, 2)
    test_set = make_subjects(cfg, "test", cfg.n_test, cfg.n_test_lesioned, 3)

    source = PatchSource([(s.volume, s.mask) for s in train_set], edge, cfg.train.min_mask_fraction)
    eval_normals = [s for s in val_set if s.label == 0]
    eval_source = PatchSource([(s.volume, s.mask) for s in eval_normals], edge, cfg.train.min_mask_fraction)
    eval_patches = eval_source(cfg.n_eval_patches, np.random.default_rng([cfg.seed, 99]))

    model = Glow3D(cfg.flow, seed=cfg.seed)
    log.info("training %s", cfg.flow)
    init_model = Glow3D(cfg.flow, seed=cfg.seed)
    train(init_model, source, replace(cfg.train, iterations=0))
    bpd_init = _mean_bpd(init_model, eval_patches)
    state = train(model, source, cfg.train, out / "model.rflw", out / "train_log.csv")
    bpd_final = _mean_bpd(model, eval_patches)
    model.eval()
    t_train = time.perf_counter() - t0

    log.info("scoring validation subjects")
    val_scores = {s.subject: score_volume(s.volume, s.mask, model, grid, workers=cfg.workers) for s in val_set}
    calib_pool = []
    for s in eval_normals:
        calib_pool += lung_patch_scores(val_scores[s.subject], s.mask, edge)
    calibration = calibrate(calib_pool)
    save_calibration(calibration, out / "calibration.json")
    base = PipelineConfig(grid=grid, calibration=calibration)

    def volumes(subjects, scores):
        res = []
        for s in subjects:
            logp = aggregate_map(scores[s.subject], s.volume.dims, grid, base.smoothing_sigma_vox)
            res.append(ev.LabeledScore(s.subject, anomaly_volume(logp, s.mask, base), s.label))
        return res

    val_labeled = volumes(val_set, val_scores)
    chosen_t = ev.select_threshold(val_labeled)
    pcfg = replace(base, decision_threshold_T_cm3=chosen_t)
    (out / "pipeline.cfg").write_text(config_to_text(pcfg))

    log.info("scoring test subjects")
    test_scores = {s.subject: score_volume(s.volume, s.mask, model, grid, workers=cfg.workers) for s in test_set}
    test_labeled = volumes(test_set, test_scores)
    results = {}
    for s, ls in zip(test_set, test_labeled):
        logp = aggregate_map(test_scores[s.subject], s.volume.dims, grid, pcfg.smoothing_sigma_vox)
        bin_mask = binarize(logp, s.mask, calibration, pcfg.binarize_quantile)
        filtered = filter_components(bin_mask, s.volume.spacing, pcfg.min_component_cm3)
        r = classify(filtered, s.volume.spacing, chosen_t)
        r.scores = test_scores[s.subject]
        results[s.subject] = r.to_json()
    (out / "test_results.json").write_text(json.dumps(results, indent=1, sort_keys=True))

    metrics = ev.evaluate(test_labeled, chosen_t)
    ev.write_metrics_json(metrics, out / "metrics.json")
    ev.write_roc_csv(metrics.roc_points, out / "roc.csv")
    ev.write_scores_csv(val_labeled, out / "val_scores.csv")
    ev.write_scores_csv(test_labeled, out / "test_scores.csv")

    lesion_means = _lesion_patch_means(test_set, test_scores, edge, cfg.train.min_mask_fraction)
    report = {
        "bits_per_dim_init": bpd_init,
        "bits_per_dim_final": bpd_final,
        "bits_per_dim_relative_decrease": (bpd_init - bpd_final) / abs(bpd_init),
        "train_loss_first": state.history[0] if state.history else None,
        "train_loss_last50_mean": float(np.mean(state.history[-50:])) if state.history else None,
        "chosen_T_cm3": chosen_t,
        "val_youden_j": ev.youden_j(val_labeled, chosen_t),
        "test_auroc": metrics.auroc,
        "test_f1": metrics.f1,
        "test_accuracy": metrics.accuracy,
        **lesion_means,
        "train_seconds": t_train,
        "total_seconds": time.perf_counter() - t0,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2))
    log.info("report: %s", report)
    return report


def _lesion_patch_means(subjects, scores, edge, min_fraction=0.5) -> dict:
    """Lesion-touching patches vs. lesion-free patches of the training population."""
    lesion, normal = [], []
    for s in subjects:
        cov = mask_coverage(s.mask.bits, edge)
        for o, v in scores[s.subject]:
            if extract(s.lesions.bits, o, edge).any():
                lesion.append(v)
            elif cov[o] >= min_fraction * edge**3:
                normal.append(v)
    return {
        "lesion_patch_mean_per_dim_nats": float(np.mean(lesion)) if lesion else None,
        "normal_patch_mean_per_dim_nats": float(np.mean(normal)),
        "n_lesion_patches": len(lesion),
        "n_normal_patches": len(normal),
    }
