import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from milfuse.metrics import (
    MetricsReport,
    ScoredCase,
    aggregate,
    confusion_metrics,
    evaluate_cases,
    roc_auc,
)


def make_cases(scores, labels):
    return [
        ScoredCase(id=f"c{i}", score=float(s), label=int(l))
        for i, (s, l) in enumerate(zip(scores, labels))
    ]


def pairwise_auc(scores, labels):
    """Independent oracle: average over all (positive, negative) pairs,
    counting ties as half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    positives = scores[labels == 1]
    negatives = scores[labels == 0]
    total = 0.0
    for p in positives:
        for n in negatives:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(positives) * len(negatives))


class TestScoredCase:
    def test_rejects_out_of_range_score(self):
        with pytest.raises(ValueError):
            ScoredCase(id="a", score=1.5, label=1)
        with pytest.raises(ValueError):
            ScoredCase(id="a", score=-0.01, label=0)

    def test_rejects_non_finite_score(self):
        with pytest.raises(ValueError):
            ScoredCase(id="a", score=float("nan"), label=0)

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            ScoredCase(id="a", score=0.5, label=2)

    def test_accepts_boundaries(self):
        ScoredCase(id="a", score=0.0, label=0)
        ScoredCase(id="b", score=1.0, label=1)


class TestRocAuc:
    def test_perfect_separation(self):
        cases = make_cases([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert roc_auc(cases) == pytest.approx(1.0)

    def test_perfect_inversion(self):
        cases = make_cases([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
        assert roc_auc(cases) == pytest.approx(0.0)

    def test_all_tied_scores(self):
        cases = make_cases([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0])
        assert roc_auc(cases) == pytest.approx(0.5)

    def test_worked_mixed_example(self):
        # one discordant pair out of four: 3/4
        cases = make_cases([0.9, 0.6, 0.4, 0.3], [1, 0, 1, 0])
        assert roc_auc(cases) == pytest.approx(0.75)

    def test_single_class_raises(self):
        with pytest.raises(ValueError, match="both classes"):
            roc_auc(make_cases([0.2, 0.4], [1, 1]))
        with pytest.raises(ValueError, match="both classes"):
            roc_auc(make_cases([0.2, 0.4], [0, 0]))

    def test_matches_pairwise_oracle_with_ties(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = rng.integers(2, 30)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            # quantized scores force frequent ties
            scores = rng.integers(0, 5, size=n) / 4.0
            cases = make_cases(scores, labels)
            assert roc_auc(cases) == pytest.approx(
                pairwise_auc(scores, labels), abs=1e-12
            )

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=50, deadline=None)
    def test_oracle_agreement_and_range(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        scores = rng.random(n)
        value = roc_auc(make_cases(scores, labels))
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(pairwise_auc(scores, labels), abs=1e-12)

    def test_label_complement_symmetry(self):
        rng = np.random.default_rng(11)
        scores = rng.random(20)
        labels = rng.integers(0, 2, size=20)
        labels[0], labels[1] = 0, 1
        direct = roc_auc(make_cases(scores, labels))
        flipped = roc_auc(make_cases(scores, 1 - labels))
        assert direct == pytest.approx(1.0 - flipped, abs=1e-12)


class TestConfusionMetrics:
    def test_worked_example(self):
        m = confusion_metrics(
            make_cases([0.9, 0.6, 0.4, 0.3], [1, 0, 1, 0]), threshold=0.5
        )
        # predictions at 0.5: [1, 1, 0, 0] vs labels [1, 0, 1, 0]
        assert m.accuracy == pytest.approx(0.5)
        assert m.recall == pytest.approx(0.5)
        assert m.specificity == pytest.approx(0.5)
        assert m.precision == pytest.approx(0.5)
        assert m.f_score == pytest.approx(0.5)
        assert m.degenerate == ()

    def test_threshold_is_inclusive_for_positives(self):
        m = confusion_metrics(make_cases([0.5], [1]), threshold=0.5)
        assert m.recall == 1.0 and m.accuracy == 1.0

    def test_degenerate_rates_are_zero_and_flagged(self):
        # no positive labels and no positive predictions
        m = confusion_metrics(make_cases([0.1, 0.2], [0, 0]), threshold=0.5)
        assert m.recall == 0.0 and m.precision == 0.0 and m.f_score == 0.0
        assert set(m.degenerate) == {"recall", "precision", "f_score"}
        assert m.specificity == 1.0 and m.accuracy == 1.0

    def test_empty_input_raises(self):
        with pytest.raises(ValueError, match="no cases"):
            confusion_metrics([])

    def test_matches_naive_counts(self):
        rng = np.random.default_rng(3)
        scores = rng.random(50)
        labels = rng.integers(0, 2, size=50)
        m = confusion_metrics(make_cases(scores, labels), threshold=0.5)
        predicted = scores >= 0.5
        tp = int((predicted & (labels == 1)).sum())
        tn = int((~predicted & (labels == 0)).sum())
        fp = int((predicted & (labels == 0)).sum())
        fn = int((~predicted & (labels == 1)).sum())
        assert m.accuracy == pytest.approx((tp + tn) / 50)
        assert m.recall == pytest.approx(tp / (tp + fn))
        assert m.specificity == pytest.approx(tn / (tn + fp))
        assert m.precision == pytest.approx(tp / (tp + fp))
        assert m.f_score == pytest.approx(2 * tp / (2 * tp + fp + fn))


class TestEvaluateAndAggregate:
    def random_cases(self, seed, n=20):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        return make_cases(rng.random(n), labels)

    def test_evaluate_cases_keys(self):
        row = evaluate_cases(self.random_cases(0))
        assert set(row) == {
            "roc_auc",
            "f_score",
            "specificity",
            "recall",
            "precision",
            "accuracy",
        }

    def test_aggregate_mean_and_population_std(self):
        folds = [{"roc_auc": 0.8}, {"roc_auc": 0.9}]
        mean, std = aggregate(folds)
        assert mean["roc_auc"] == pytest.approx(0.85)
        assert std["roc_auc"] == pytest.approx(0.05)  # ddof=0

    def test_aggregate_requires_matching_keys(self):
        with pytest.raises(ValueError):
            aggregate([{"roc_auc": 0.8}, {"accuracy": 0.9}])

    def test_aggregate_empty_raises(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_report_json_round_trip(self, tmp_path):
        folds = [evaluate_cases(self.random_cases(s)) for s in (1, 2, 3)]
        report = MetricsReport.from_fold_rows(
            folds, provenance={"name": "demo", "seed": 1}
        )
        path = tmp_path / "report.json"
        report.save(path)
        loaded = MetricsReport.load(path)
        assert loaded.folds == report.folds
        assert loaded.mean == report.mean
        assert loaded.std == report.std
        assert loaded.provenance == report.provenance

    def test_report_json_is_sorted_and_tagged(self):
        report = MetricsReport.from_fold_rows([{"roc_auc": 0.5}])
        payload = json.loads(report.to_json())
        assert payload["format"] == "milfuse-metrics-report"
        text = report.to_json()
        assert text.rstrip("\n") == json.dumps(
            json.loads(text), indent=2, sort_keys=True
        )

    def test_report_csv_layout(self):
        folds = [
            {"accuracy": 0.5, "roc_auc": 0.8},
            {"accuracy": 0.7, "roc_auc": 0.9},
        ]
        report = MetricsReport.from_fold_rows(folds)
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "fold,accuracy,roc_auc"
        assert lines[1].startswith("0,")
        assert lines[2].startswith("1,")
        assert lines[-1].startswith("mean(std),")
        assert "0.600000(0.100000)" in lines[-1]
        assert "0.850000(0.050000)" in lines[-1]
