"""Distribution-consistent few-shot sampling.

The few-shot split mirrors the class distribution of the full training
set: per-class counts follow the largest-remainder method at a configured
fraction (default 1%), and the development split is drawn from the
remainder with identical per-class counts.  A ``pinned`` policy accepts
externally fixed per-class counts so published splits stay
bit-reproducible.

Determinism contract: ``draw_split`` uses a Mersenne-Twister generator
(Python's ``random.Random``) seeded with the split seed.  Classes are
visited in label-space order (for joint plans: aspect-category order,
then label order); within a class, ids in manifest order are shuffled by
Fisher-Yates and the first k become the train split, the next k the dev
split.  Same manifest order, plan, and seed always give the same split.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

from .data import DatasetManifest, class_histogram, joint_histogram, FINE
from .errors import ConfigError, ValidationError

LARGEST_REMAINDER = "largest-remainder"
PINNED = "pinned"

ClassKey = Union[str, tuple[str, str]]  # label, or (aspect, label)


@dataclass(frozen=True)
class AllocationPlan:
    """Per-class few-shot counts and how they were derived."""

    per_class: Mapping[ClassKey, int]
    fraction: float
    policy: str

    def __post_init__(self):
        object.__setattr__(self, "per_class", dict(self.per_class))
        if any(c < 0 for c in self.per_class.values()):
            raise ValidationError("allocation counts must be non-negative")

    @property
    def total(self) -> int:
        return sum(self.per_class.values())

    @property
    def is_joint(self) -> bool:
        return any(isinstance(k, tuple) for k in self.per_class)


@dataclass(frozen=True)
class FewShotSplit:
    """Disjoint train/dev id lists drawn from one manifest."""

    train: tuple[str, ...]
    dev: tuple[str, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "dev", tuple(self.dev))
        if set(self.train) & set(self.dev):
            raise ValidationError("train and dev splits overlap")


def _round_half_up(x: float) -> int:
    # Classic largest-remainder rounding; avoids Python's round-half-even.
    return math.floor(x + 0.5)


def _largest_remainder(
    histogram: Mapping[ClassKey, int], fraction: float, order: Sequence[ClassKey]
) -> dict[ClassKey, int]:
    total = sum(histogram.values())
    target = _round_half_up(fraction * total)
    quotas = {key: fraction * histogram[key] for key in order}
    counts = {key: math.floor(quotas[key]) for key in order}
    leftover = target - sum(counts.values())
    # Stable sort keeps the configured class order on remainder ties.
    by_remainder = sorted(order, key=lambda k: -(quotas[k] - counts[k]))
    for key in by_remainder[:leftover]:
        counts[key] += 1
    return counts


def _check_fraction(fraction: float) -> None:
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")


def allocate_counts(
    histogram: Mapping[str, int],
    fraction: float,
    policy: str = LARGEST_REMAINDER,
    pinned: Optional[Mapping[str, int]] = None,
    order: Optional[Sequence[str]] = None,
) -> AllocationPlan:
    """Per-label few-shot counts matching the full-set class distribution.

    With the largest-remainder policy the total is round(fraction * N) and
    every class lands within one unit of its exact quota; remainder units
    go to the largest fractional remainders, ties broken by label order.
    """
    if not histogram:
        raise ConfigError("histogram is empty")
    _check_fraction(fraction)
    keys = list(order) if order is not None else list(histogram)
    if set(keys) != set(histogram):
        raise ConfigError("order does not cover the histogram keys")
    if policy == LARGEST_REMAINDER:
        counts = _largest_remainder(histogram, fraction, keys)
    elif policy == PINNED:
        if pinned is None:
            raise ConfigError("pinned policy requires explicit per-class counts")
        unknown = set(pinned) - set(keys)
        if unknown:
            raise ConfigError(f"pinned counts for unknown classes: {sorted(unknown)}")
        counts = {key: int(pinned.get(key, 0)) for key in keys}
        for key, count in counts.items():
            if count < 0:
                raise ConfigError(f"pinned count for {key!r} is negative")
            if count > histogram[key]:
                raise ConfigError(
                    f"pinned count {count} for {key!r} exceeds class size {histogram[key]}"
                )
    else:
        raise ConfigError(f"unknown allocation policy {policy!r}")
    return AllocationPlan(per_class=counts, fraction=fraction, policy=policy)


def allocate_counts_joint(
    histogram: Mapping[tuple[str, str], int],
    fraction: float,
    policy: str = LARGEST_REMAINDER,
    pinned: Optional[Mapping[tuple[str, str], int]] = None,
    order: Optional[Sequence[tuple[str, str]]] = None,
) -> AllocationPlan:
    """Largest remainder over (aspect, label) cells.

    Balances aspect categories and sentiments simultaneously; label
    marginals then sit within (number of aspects) units of the label
    quota.  Cells with zero instances are allowed and get count zero.
    """
    return allocate_counts(histogram, fraction, policy=policy, pinned=pinned, order=order)


def _class_key(instance, joint: bool) -> ClassKey:
    return (instance.aspect, instance.label) if joint else instance.label


def draw_split(manifest: DatasetManifest, plan: AllocationPlan, seed: int) -> FewShotSplit:
    """Draw disjoint train and dev id sets with the plan's per-class counts.

    Sampling is uniform without replacement within each class; train is
    drawn first, dev from the remainder (same counts).  Deterministic
    given manifest order, plan, and seed.
    """
    joint = plan.is_joint
    if joint and manifest.label_space.kind != FINE:
        raise ValidationError("joint allocation plan requires a fine-grained manifest")
    pools: dict[ClassKey, list[str]] = {key: [] for key in plan.per_class}
    for inst in manifest.instances:
        key = _class_key(inst, joint)
        if key in pools:
            pools[key].append(inst.id)
    for key, count in plan.per_class.items():
        if 2 * count > len(pools[key]):
            raise ValidationError(
                f"class {key!r} has {len(pools[key])} instances; cannot draw "
                f"{count} train + {count} dev without replacement"
            )
    rng = random.Random(seed)
    train: list[str] = []
    dev: list[str] = []
    for key in _plan_order(manifest, plan, joint):
        count = plan.per_class[key]
        ids = list(pools[key])
        rng.shuffle(ids)
        train.extend(ids[:count])
        dev.extend(ids[count : 2 * count])
    return FewShotSplit(train=tuple(train), dev=tuple(dev), seed=seed)


def _plan_order(manifest: DatasetManifest, plan: AllocationPlan, joint: bool) -> list[ClassKey]:
    labels = manifest.label_space.labels
    if not joint:
        return [l for l in labels if l in plan.per_class]
    cats = manifest.aspect_categories or ()
    ordered = [(a, l) for a in cats for l in labels if (a, l) in plan.per_class]
    # Plans built from other sources keep their own key order for leftovers.
    leftover = [k for k in plan.per_class if k not in set(ordered)]
    return ordered + leftover


def plan_for_manifest(
    manifest: DatasetManifest,
    fraction: float,
    policy: str = LARGEST_REMAINDER,
    pinned: Optional[Mapping] = None,
    joint: bool = False,
) -> AllocationPlan:
    """Allocation plan straight from a manifest's class histogram."""
    if joint:
        hist = joint_histogram(manifest)
        order = [(a, l) for a in manifest.aspect_categories for l in manifest.label_space.labels]
        return allocate_counts_joint(hist, fraction, policy=policy, pinned=pinned, order=order)
    hist = class_histogram(manifest)
    return allocate_counts(
        hist, fraction, policy=policy, pinned=pinned, order=manifest.label_space.labels
    )
