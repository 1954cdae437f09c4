"""Evaluation metrics and per-fold report aggregation.

ROC AUC is computed as the Mann-Whitney rank statistic with midranks for
ties, which equals P(score+ > score-) + 1/2 P(tie) and the trapezoidal
area under the ROC curve. Confusion metrics threshold at 0.5 by default
(predict positive iff score >= threshold); any 0/0 ratio is defined as 0
and flagged so degenerate folds are visible in reports.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

METRIC_NAMES = ("roc_auc", "f_score", "specificity", "recall", "precision", "accuracy")

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredCase:
    """One evaluated bag: identifier, predicted probability, true label."""

    id: str
    score: float
    label: int

    def __post_init__(self):
        if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be a finite probability, got {self.score}")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average rank of their run."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_values = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_values[j + 1] == sorted_values[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(cases: list[ScoredCase]) -> float:
    """Area under the ROC curve via the rank-sum statistic.

    Raises ValueError when only one class is present.
    """
    labels = np.array([c.label for c in cases], dtype=np.int64)
    scores = np.array([c.score for c in cases], dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: need both classes present")

    ranks = _midranks(scores)
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass(frozen=True)
class ConfusionMetrics:
    """Threshold-based classification metrics for one set of cases."""

    specificity: float
    recall: float
    precision: float
    f_score: float
    accuracy: float
    degenerate: tuple[str, ...] = ()  # metrics that hit a 0/0 and were set to 0

    def as_dict(self) -> dict[str, float]:
        return {
            "specificity": self.specificity,
            "recall": self.recall,
            "precision": self.precision,
            "f_score": self.f_score,
            "accuracy": self.accuracy,
        }


def confusion_metrics(cases: list[ScoredCase], threshold: float = DEFAULT_THRESHOLD) -> ConfusionMetrics:
    """Specificity, recall, precision, F1 and accuracy at a threshold.

    Predicts positive iff score >= threshold. The positive class is
    label 1; F1 is the harmonic mean of precision and recall.
    """
    if not cases:
        raise ValueError("no cases to evaluate")
    labels = np.array([c.label for c in cases], dtype=np.int64)
    predicted = np.array([c.score >= threshold for c in cases], dtype=np.int64)

    tp = int(((predicted == 1) & (labels == 1)).sum())
    tn = int(((predicted == 0) & (labels == 0)).sum())
    fp = int(((predicted == 1) & (labels == 0)).sum())
    fn = int(((predicted == 0) & (labels == 1)).sum())

    degenerate = []

    def ratio(numerator: int, denominator: int, name: str) -> float:
        if denominator == 0:
            degenerate.append(name)
            return 0.0
        return numerator / denominator

    specificity = ratio(tn, tn + fp, "specificity")
    recall = ratio(tp, tp + fn, "recall")
    precision = ratio(tp, tp + fp, "precision")
    if precision + recall == 0.0:
        degenerate.append("f_score")
        f_score = 0.0
    else:
        f_score = 2.0 * precision * recall / (precision + recall)
    accuracy = (tp + tn) / len(cases)

    return ConfusionMetrics(
        specificity=specificity,
        recall=recall,
        precision=precision,
        f_score=f_score,
        accuracy=accuracy,
        degenerate=tuple(degenerate),
    )


def evaluate_cases(cases: list[ScoredCase], threshold: float = DEFAULT_THRESHOLD) -> dict[str, float]:
    """All report metrics for one fold's scored cases."""
    row = {"roc_auc": roc_auc(cases)}
    row.update(confusion_metrics(cases, threshold).as_dict())
    return row


def aggregate(rows: list[dict[str, float]]) -> tuple[dict[str, float], dict[str, float]]:
    """Arithmetic mean and population standard deviation per metric."""
    if not rows:
        raise ValueError("cannot aggregate zero metric rows")
    names = list(rows[0].keys())
    for row in rows:
        if list(row.keys()) != names:
            raise ValueError("metric rows disagree on metric names")
    mean = {}
    std = {}
    for name in names:
        values = np.array([row[name] for row in rows], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=0))
    return mean, std


@dataclass
class MetricsReport:
    """Per-fold metric rows, their aggregate, and run provenance."""

    folds: list[dict[str, float]]
    mean: dict[str, float]
    std: dict[str, float]
    provenance: dict = field(default_factory=dict)

    @classmethod
    def from_fold_rows(cls, rows: list[dict[str, float]], provenance: dict | None = None) -> "MetricsReport":
        mean, std = aggregate(rows)
        return cls(folds=rows, mean=mean, std=std, provenance=provenance or {})

    def metric_names(self) -> list[str]:
        return list(self.folds[0].keys()) if self.folds else list(self.mean.keys())

    def to_json(self) -> str:
        payload = {
            "format": "milfuse-metrics-report",
            "version": 1,
            "folds": self.folds,
            "mean": self.mean,
            "std": self.std,
            "provenance": self.provenance,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        if payload.get("format") != "milfuse-metrics-report":
            raise ValueError("not a metrics report")
        if payload.get("version") != 1:
            raise ValueError(f"unsupported report version {payload.get('version')}")
        return cls(
            folds=payload["folds"],
            mean=payload["mean"],
            std=payload["std"],
            provenance=payload.get("provenance", {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())

    def to_csv(self) -> str:
        """Flat table: one row per fold plus a mean(std) aggregate row."""
        names = self.metric_names()
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["fold"] + names)
        for index, row in enumerate(self.folds):
            writer.writerow([index] + [f"{row[name]:.6f}" for name in names])
        writer.writerow(
            ["mean(std)"] + [f"{self.mean[name]:.6f}({self.std[name]:.6f})" for name in names]
        )
        return buffer.getvalue()

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())
