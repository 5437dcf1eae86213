"""Accuracy, weighted F1, and multi-seed aggregation.

Datasets in this domain are class-imbalanced, so F1 is support-weighted:
each class's F1 enters the sum with weight support / N.  Aggregation
reports mean and population standard deviation over all runs (all
seed x repeat combinations jointly).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

from .data import LabelSpace
from .errors import DataError


def _check_ids(preds: Mapping[str, str], gold: Mapping[str, str]) -> None:
    if set(preds) != set(gold):
        only_p = sorted(set(preds) - set(gold))[:5]
        only_g = sorted(set(gold) - set(preds))[:5]
        raise DataError(
            f"prediction/gold id mismatch (pred-only {only_p}, gold-only {only_g})"
        )
    if not preds:
        raise DataError("no predictions to score")


def accuracy(preds: Mapping[str, str], gold: Mapping[str, str]) -> float:
    """Fraction of exact label matches over a shared id set."""
    _check_ids(preds, gold)
    hits = sum(1 for i, label in gold.items() if preds[i] == label)
    return hits / len(gold)


def weighted_f1(
    preds: Mapping[str, str], gold: Mapping[str, str], label_space: LabelSpace
) -> float:
    """Support-weighted mean of per-class F1.

    F1 for a class with zero precision+recall is defined as 0; a class
    with zero gold support contributes nothing.
    """
    _check_ids(preds, gold)
    total = len(gold)
    score = 0.0
    for label in label_space.labels:
        support = sum(1 for l in gold.values() if l == label)
        if support == 0:
            continue
        tp = sum(1 for i, l in gold.items() if l == label and preds[i] == label)
        predicted = sum(1 for l in preds.values() if l == label)
        precision = tp / predicted if predicted else 0.0
        recall = tp / support
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        score += (support / total) * f1
    return score


@dataclass(frozen=True)
class RunResult:
    """Metrics and predictions of one (seed, repeat) pipeline run."""

    seed: int
    repeat_index: int
    accuracy: float
    weighted_f1: float
    predictions: Mapping[str, str]

    def __post_init__(self):
        for name in ("accuracy", "weighted_f1"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise DataError(f"{name} out of [0, 1]: {value}")
        object.__setattr__(self, "predictions", dict(self.predictions))


@dataclass(frozen=True)
class AggregateReport:
    """Mean and population standard deviation over a set of runs."""

    mean_acc: float
    std_acc: float
    mean_f1: float
    std_f1: float
    runs: tuple[RunResult, ...]


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n  # population variance
    return mean, math.sqrt(var)


def aggregate(runs: Sequence[RunResult]) -> AggregateReport:
    """Aggregate run metrics; a single run reports a standard deviation of 0."""
    if not runs:
        raise DataError("aggregate needs at least one run")
    mean_acc, std_acc = _mean_std([r.accuracy for r in runs])
    mean_f1, std_f1 = _mean_std([r.weighted_f1 for r in runs])
    return AggregateReport(
        mean_acc=mean_acc, std_acc=std_acc, mean_f1=mean_f1, std_f1=std_f1, runs=tuple(runs)
    )


def report_to_json(report: AggregateReport, config_echo: Optional[dict] = None) -> str:
    """Deterministic JSON serialization (no timestamps, sorted keys)."""
    payload = {
        "std_kind": "population",
        "mean_acc": report.mean_acc,
        "std_acc": report.std_acc,
        "mean_f1": report.mean_f1,
        "std_f1": report.std_f1,
        "n_runs": len(report.runs),
        "runs": [
            {
                "seed": r.seed,
                "repeat": r.repeat_index,
                "accuracy": r.accuracy,
                "weighted_f1": r.weighted_f1,
            }
            for r in report.runs
        ],
    }
    if config_echo is not None:
        payload["config"] = config_echo
    return json.dumps(payload, indent=2, sort_keys=True)


def format_report(report: AggregateReport) -> str:
    """Human-readable summary table (std is population std over all runs)."""
    lines = [
        f"{'seed':>6} {'repeat':>7} {'acc':>8} {'w-f1':>8}",
        "-" * 32,
    ]
    for r in report.runs:
        lines.append(
            f"{r.seed:>6} {r.repeat_index:>7} {r.accuracy:>8.4f} {r.weighted_f1:>8.4f}"
        )
    lines.append("-" * 32)
    lines.append(
        f"mean acc {report.mean_acc:.4f} (std {report.std_acc:.4f})  "
        f"mean w-f1 {report.mean_f1:.4f} (std {report.std_f1:.4f})  "
        f"runs {len(report.runs)}"
    )
    return "\n".join(lines)
