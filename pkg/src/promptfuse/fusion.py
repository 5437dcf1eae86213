"""Label distributions and posterior fusion across prompts.

Mask logits over verbalizer words become a label distribution by a
softmax restricted to those words.  Distributions from n different
prompts for the same instance are fused by treating the prompts as
conditionally independent given the label: the fused posterior is
proportional to the product of per-prompt posteriors divided by the
label prior raised to n - 1, renormalized per instance.  An
average-fusion variant (plain per-label mean) is kept for comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import LabelSpace
from .errors import BackendError, ConfigError, ValidationError

# Probabilities are floored before logs so near-degenerate backends cannot
# produce -inf.
PROB_FLOOR = 1e-12

EMPIRICAL = "empirical-train"
UNIFORM = "uniform"
PINNED = "pinned"


@dataclass(frozen=True)
class LabelDistribution:
    """Probability vector over an ordered label set."""

    labels: tuple[str, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        if len(self.labels) != len(self.probs):
            raise ValidationError("labels and probs length mismatch")
        if any((not math.isfinite(p)) or p < 0 for p in self.probs):
            raise ValidationError(f"probabilities must be finite and >= 0: {self.probs}")
        total = sum(self.probs)
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"probabilities sum to {total!r}, expected 1")

    @classmethod
    def from_weights(cls, labels: Sequence[str], weights: Sequence[float]) -> "LabelDistribution":
        w = np.asarray(weights, dtype=np.float64)
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValidationError(f"weights must be finite and >= 0: {weights}")
        total = float(w.sum())
        if total <= 0:
            raise ValidationError("weights sum to zero")
        return cls(labels=tuple(labels), probs=tuple(w / total))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.labels, self.probs))

    def prob(self, label: str) -> float:
        return self.probs[self.labels.index(label)]


@dataclass(frozen=True)
class PriorEstimate:
    """Label prior used by probabilistic fusion, and where it came from."""

    probs: LabelDistribution
    source: str


def uniform_prior(label_space: LabelSpace) -> PriorEstimate:
    n = len(label_space.labels)
    return PriorEstimate(
        probs=LabelDistribution(label_space.labels, (1.0 / n,) * n), source=UNIFORM
    )


def empirical_prior(
    label_counts: Mapping[str, int], label_space: LabelSpace, smoothing: float = 1.0
) -> PriorEstimate:
    """Class frequencies of the few-shot train split, add-one smoothed.

    Smoothing keeps every prior entry strictly positive even when a class
    drew zero training instances.
    """
    weights = [label_counts.get(l, 0) + smoothing for l in label_space.labels]
    return PriorEstimate(
        probs=LabelDistribution.from_weights(label_space.labels, weights), source=EMPIRICAL
    )


def pinned_prior(probs: Mapping[str, float], label_space: LabelSpace) -> PriorEstimate:
    missing = [l for l in label_space.labels if l not in probs]
    if missing:
        raise ConfigError(f"pinned prior missing labels {missing}")
    dist = LabelDistribution.from_weights(
        label_space.labels, [probs[l] for l in label_space.labels]
    )
    return PriorEstimate(probs=dist, source=PINNED)


def distribution_from_scores(
    scores: Mapping[str, float], label_space: LabelSpace
) -> LabelDistribution:
    """Softmax over the verbalizer words' mask logits, in label order.

    Numerically stable (max subtraction), so the result is invariant to a
    constant shift of all logits.
    """
    logits = []
    for label in label_space.labels:
        word = label_space.verbalizer[label]
        if word not in scores:
            raise BackendError(f"backend returned no logit for verbalizer word {word!r}")
        value = float(scores[word])
        if not math.isfinite(value):
            raise BackendError(f"non-finite logit {value!r} for word {word!r}")
        logits.append(value)
    arr = np.asarray(logits, dtype=np.float64)
    arr -= arr.max()
    exp = np.exp(arr)
    return LabelDistribution(label_space.labels, tuple(exp / exp.sum()))


def _check_aligned(dists: Sequence[LabelDistribution]) -> tuple[str, ...]:
    if not dists:
        raise ConfigError("fusion needs at least one distribution")
    labels = dists[0].labels
    for d in dists[1:]:
        if d.labels != labels:
            raise ValidationError(f"label order mismatch in fusion: {d.labels} vs {labels}")
    return labels


def fuse(dists: Sequence[LabelDistribution], prior: PriorEstimate) -> LabelDistribution:
    """Fuse per-prompt posteriors under conditional independence.

    Computed in log space: exp(sum_k log p_k(l) - (n - 1) log prior(l)),
    renormalized per instance.  With n = 1 this is the identity; with a
    uniform prior it reduces to the normalized elementwise product.
    """
    labels = _check_aligned(dists)
    if prior.probs.labels != labels:
        raise ValidationError("prior label order does not match the distributions")
    if any(p <= 0 for p in prior.probs.probs):
        raise ConfigError("prior has a zero entry; every label needs positive prior mass")
    n = len(dists)
    mat = np.asarray([d.probs for d in dists], dtype=np.float64)
    mat = np.maximum(mat, PROB_FLOOR)
    log_fused = np.sum(np.log(mat), axis=0) - (n - 1) * np.log(
        np.asarray(prior.probs.probs, dtype=np.float64)
    )
    log_fused -= log_fused.max()
    weights = np.exp(log_fused)
    return LabelDistribution.from_weights(labels, weights)


def average_fuse(dists: Sequence[LabelDistribution]) -> LabelDistribution:
    """Plain per-label arithmetic mean of the distributions, renormalized."""
    labels = _check_aligned(dists)
    mat = np.asarray([d.probs for d in dists], dtype=np.float64)
    return LabelDistribution.from_weights(labels, mat.mean(axis=0))


def predict(dist: LabelDistribution) -> str:
    """Argmax label; exact ties go to the earliest label in label order."""
    best_idx = 0
    for i, p in enumerate(dist.probs):
        if p > dist.probs[best_idx]:
            best_idx = i
    return dist.labels[best_idx]
