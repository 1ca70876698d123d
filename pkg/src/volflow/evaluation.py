"""Patient-level metrics: ROC, AUROC, F1, accuracy and threshold selection."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

# reference row of the published comparison (private data, not reproducible here)
REFERENCE_AUROC = 0.952
REFERENCE_F1 = 0.94
REFERENCE_ACCURACY = 0.924


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledScore:
    subject: str
    score: float
    label: int  # 0 = Normal, 1 = Abnormal

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise MetricError(f"non-finite score for subject {self.subject!r}")
        if self.label not in (0, 1):
            raise MetricError(f"label must be 0 or 1, got {self.label!r}")


@dataclass
class Metrics:
    auroc: float
    f1: float
    accuracy: float
    chosen_T: float
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        return d


def _arrays(scores: Sequence[LabeledScore]):
    s = np.array([x.score for x in scores], dtype=np.float64)
    y = np.array([x.label for x in scores], dtype=np.int64)
    return s, y


def _check_both_classes(y: np.ndarray) -> tuple[int, int]:
    p = int(y.sum())
    n = int(len(y) - p)
    if p == 0 or n == 0:
        raise MetricError("need at least one Normal and one Abnormal sample")
    return p, n


def auroc(scores: Sequence[LabeledScore]) -> float:
    """Mann-Whitney statistic via mid-ranks: (wins + ties/2) / (P * N)."""
    s, y = _arrays(scores)
    p, n = _check_both_classes(y)
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y == 1].sum() - p * (p + 1) / 2.0
    return float(u / (p * n))


def roc_curve(scores: Sequence[LabeledScore]) -> list[tuple[float, float, float]]:
    """``(fpr, tpr, threshold)`` points, predicting Abnormal when ``score >= threshold``.

    Starts at ``(0, 0, inf)`` and ends at ``(1, 1, min score)``.
    """
    s, y = _arrays(scores)
    p, n = _check_both_classes(y)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += int(y[j])
            fp += int(1 - y[j])
            j += 1
        points.append((fp / n, tp / p, float(s[i])))
        i = j
    return points


def auroc_trapezoid(points: Sequence[tuple[float, float, float]]) -> float:
    fpr = np.array([pt[0] for pt in points])
    tpr = np.array([pt[1] for pt in points])
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def confusion(scores: Sequence[LabeledScore], threshold: float) -> tuple[int, int, int, int]:
    """``(tp, fp, fn, tn)`` with prediction ``score > threshold``."""
    s, y = _arrays(scores)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    return tp, fp, fn, tn


def f1_accuracy(scores: Sequence[LabeledScore], threshold: float) -> tuple[float, float]:
    if not scores:
        raise MetricError("no samples")
    tp, fp, fn, tn = confusion(scores, threshold)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, (tp + tn) / len(scores)


def youden_j(scores: Sequence[LabeledScore], threshold: float) -> float:
    tp, fp, fn, tn = confusion(scores, threshold)
    return tp / (tp + fn) - fp / (fp + tn)


def threshold_sweep(t_lo: float = 0.5, t_hi: float = 20.0, step: float = 0.5) -> list[float]:
    if step <= 0 or t_hi < t_lo:
        raise MetricError("invalid threshold sweep")
    n = int(np.floor((t_hi - t_lo) / step + 1e-9))
    return [t_lo + k * step for k in range(n + 1)]


def select_threshold(scores: Sequence[LabeledScore], t_lo: float = 0.5, t_hi: float = 20.0,
                     step: float = 0.5) -> float:
    """Sweep T and keep the smallest one maximizing Youden's J."""
    _, y = _arrays(scores)
    _check_both_classes(y)
    best_t, best_j = None, -np.inf
    for t in threshold_sweep(t_lo, t_hi, step):
        j = youden_j(scores, t)
        if j > best_j:
            best_t, best_j = t, j
    return best_t


def evaluate(scores: Sequence[LabeledScore], chosen_t: float) -> Metrics:
    roc = roc_curve(scores)
    f1, acc = f1_accuracy(scores, chosen_t)
    return Metrics(auroc(scores), f1, acc, chosen_t, roc)


# --------------------------------------------------------------------------
# files


def read_scores_csv(path) -> list[LabeledScore]:
    """CSV with columns ``id,score,label``; a header row is optional."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "id":
                continue
            sid, score, label = (c.strip() for c in row[:3])
            out.append(LabeledScore(sid, float(score), int(label)))
    return out


def write_scores_csv(scores: Sequence[LabeledScore], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "score", "label"])
        for s in scores:
            w.writerow([s.subject, repr(s.score), s.label])


def write_roc_csv(points, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for p in points:
            w.writerow([repr(v) for v in p])


def write_metrics_json(m: Metrics, path) -> None:
    Path(path).write_text(json.dumps(m.to_json(), indent=2))
