import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import pairwise_auroc
from volflow.evaluation import (
    LabeledScore,
    MetricError,
    auroc,
    auroc_trapezoid,
    confusion,
    evaluate,
    f1_accuracy,
    read_scores_csv,
    roc_curve,
    select_threshold,
    threshold_sweep,
    write_metrics_json,
    write_roc_csv,
    write_scores_csv,
    youden_j,
)


def _ls(scores, labels):
    return [LabeledScore(f"s{i}", float(s), int(y)) for i, (s, y) in enumerate(zip(scores, labels))]


def _random_set(rng):
    n = int(rng.integers(2, 201))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse grid of values so ties are common
    scores = rng.integers(0, max(2, n // 3), n) * 0.5
    return scores, labels


class TestAuroc:
    def test_worked_example(self):
        data = _ls([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert auroc(data) == 0.75
        assert auroc_trapezoid(roc_curve(data)) == 0.75

    def test_perfect_and_ties(self):
        assert auroc(_ls([1, 2, 3, 4], [0, 0, 1, 1])) == 1.0
        assert auroc(_ls([2, 2, 2, 2], [0, 1, 0, 1])) == 0.5
        assert auroc_trapezoid(roc_curve(_ls([2, 2, 2, 2], [0, 1, 0, 1]))) == 0.5

    def test_three_routes_agree(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s, y = _random_set(rng)
            data = _ls(s, y)
            brute = pairwise_auroc(s, y)
            assert abs(auroc(data) - brute) <= 1e-12
            assert abs(auroc_trapezoid(roc_curve(data)) - brute) <= 1e-12

    def test_single_class(self):
        with pytest.raises(MetricError):
            auroc(_ls([1, 2], [1, 1]))

    @given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=40), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_monotone_transform_invariant(self, scores, seed):
        labels = np.random.default_rng(seed).integers(0, 2, len(scores))
        labels[0], labels[1] = 0, 1
        x = np.asarray(scores, dtype=np.float64)
        a = auroc(_ls(x, labels))
        # strictly increasing and exact in float64 for these integers
        b = auroc(_ls(x**3 + 3 * x - 11, labels))
        assert a == b

    def test_non_finite_rejected(self):
        with pytest.raises(MetricError):
            LabeledScore("x", float("nan"), 0)


class TestRoc:
    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_endpoints_and_monotone(self, seed):
        s, y = _random_set(np.random.default_rng(seed))
        pts = roc_curve(_ls(s, y))
        assert pts[0][:2] == (0.0, 0.0)
        assert pts[-1][:2] == (1.0, 1.0)
        fpr = np.array([p[0] for p in pts])
        tpr = np.array([p[1] for p in pts])
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


class TestF1Accuracy:
    def test_hand_example(self):
        # TP=3, FN=1, FP=1, TN=5 at threshold 0.5
        data = _ls([1, 1, 1, 0, 1, 0, 0, 0, 0, 0], [1, 1, 1, 1, 0, 0, 0, 0, 0, 0])
        assert confusion(data, 0.5) == (3, 1, 1, 5)
        f1, acc = f1_accuracy(data, 0.5)
        assert f1 == pytest.approx(0.75, abs=1e-15)
        assert acc == pytest.approx(0.8, abs=1e-15)

    def test_perfect(self):
        assert f1_accuracy(_ls([0, 10], [0, 1]), 5) == (1.0, 1.0)

    def test_no_predicted_positives(self):
        f1, acc = f1_accuracy(_ls([0, 1, 2], [1, 0, 1]), 100)
        assert f1 == 0.0 and acc == pytest.approx(1 / 3)

    def test_strict_inequality(self):
        assert confusion(_ls([5.0], [1]), 5.0) == (0, 0, 1, 0)

    def test_relabel_subjects_invariant(self):
        data = _ls([1, 4, 2, 8], [0, 1, 0, 1])
        renamed = [LabeledScore(f"other{i}", d.score, d.label) for i, d in enumerate(data)]
        assert f1_accuracy(data, 3) == f1_accuracy(renamed, 3)


class TestSelectThreshold:
    def test_smallest_maximizer(self):
        # normals at most 3 cm^3, abnormals above 7 cm^3: J = 1 for every T in [3, 7)
        data = _ls([0.0, 1.0, 3.0, 7.5, 9.0, 15.0], [0, 0, 0, 1, 1, 1])
        assert select_threshold(data) == 3.0

    def test_identical_scores(self):
        assert select_threshold(_ls([4.0] * 6, [0, 1] * 3)) == 0.5

    def test_shifted_out_of_range(self):
        data = _ls(np.array([0.0, 1.0, 3.0, 7.5, 9.0, 15.0]) + 100, [0, 0, 0, 1, 1, 1])
        assert all(youden_j(data, t) == 0 for t in threshold_sweep())
        assert select_threshold(data) == 0.5

    def test_single_class(self):
        with pytest.raises(MetricError):
            select_threshold(_ls([1, 2, 3], [0, 0, 0]))

    def test_sweep_grid(self):
        t = threshold_sweep()
        assert t[0] == 0.5 and t[-1] == 20.0 and len(t) == 40

    def test_evaluate_reproduces_best_j(self):
        rng = np.random.default_rng(4)
        data = _ls(np.concatenate([rng.uniform(0, 8, 10), rng.uniform(4, 20, 10)]), [0] * 10 + [1] * 10)
        t = select_threshold(data)
        best = max(youden_j(data, u) for u in threshold_sweep())
        m = evaluate(data, t)
        assert youden_j(data, m.chosen_T) == best
        tp, fp, fn, tn = confusion(data, t)
        assert m.accuracy == (tp + tn) / 20


class TestFiles:
    def test_scores_csv_roundtrip(self, tmp_path):
        data = _ls([0.125, 3.5, 1e-7], [0, 1, 1])
        write_scores_csv(data, tmp_path / "s.csv")
        assert read_scores_csv(tmp_path / "s.csv") == data

    def test_metrics_and_roc(self, tmp_path):
        data = _ls([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        m = evaluate(data, 0.5)
        write_metrics_json(m, tmp_path / "m.json")
        back = json.loads((tmp_path / "m.json").read_text())
        assert back["auroc"] == 0.75
        assert back["roc_points"][0][:2] == [0.0, 0.0]
        write_roc_csv(m.roc_points, tmp_path / "roc.csv")
        lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert lines[0] == "fpr,tpr,threshold"
        assert len(lines) == len(m.roc_points) + 1
