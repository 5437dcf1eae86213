import math
import random

import numpy as np
import pytest

from promptfuse.data import LabelSpace
from promptfuse.errors import BackendError, ConfigError, ValidationError
from promptfuse.fusion import (
    LabelDistribution,
    average_fuse,
    distribution_from_scores,
    empirical_prior,
    fuse,
    pinned_prior,
    predict,
    uniform_prior,
)

SPACE3 = LabelSpace(
    name="s3", kind="coarse", labels=("Negative", "Neutral", "Positive"),
    verbalizer={"Negative": "terrible", "Neutral": "okay", "Positive": "great"},
)


def dist(labels, probs):
    return LabelDistribution(labels=tuple(labels), probs=tuple(probs))


def direct_fuse(dists, prior):
    """Independent direct-product evaluation (no logs)."""
    n = len(dists)
    raw = [
        math.prod(d.probs[i] for d in dists) / (prior.probs.probs[i] ** (n - 1))
        for i in range(len(dists[0].probs))
    ]
    total = sum(raw)
    return [r / total for r in raw]


class TestDistributionFromScores:
    def test_independent_softmax_values(self):
        scores = {"terrible": 1.0, "okay": 2.0, "great": 3.0}
        out = distribution_from_scores(scores, SPACE3)
        assert out.probs == pytest.approx(
            (0.09003057, 0.24472847, 0.66524096), abs=1e-6
        )

    def test_equal_logits_uniform(self):
        out = distribution_from_scores({"terrible": 0.5, "okay": 0.5, "great": 0.5}, SPACE3)
        assert out.probs == pytest.approx((1 / 3, 1 / 3, 1 / 3), abs=1e-12)

    def test_shift_invariance(self):
        a = distribution_from_scores({"terrible": 1.0, "okay": 2.0, "great": 3.0}, SPACE3)
        b = distribution_from_scores({"terrible": 101.0, "okay": 102.0, "great": 103.0}, SPACE3)
        assert a.probs == pytest.approx(b.probs, abs=1e-9)

    def test_missing_word(self):
        with pytest.raises(BackendError, match="okay"):
            distribution_from_scores({"terrible": 1.0, "great": 3.0}, SPACE3)

    def test_non_finite_logit(self):
        with pytest.raises(BackendError, match="non-finite"):
            distribution_from_scores(
                {"terrible": float("nan"), "okay": 1.0, "great": 2.0}, SPACE3
            )


class TestFuse:
    def test_single_distribution_is_identity(self):
        d = dist(("A", "B"), (0.25, 0.75))
        prior = pinned_prior({"A": 0.9, "B": 0.1}, _space2())
        out = fuse([d], prior)
        assert out.probs == pytest.approx(d.probs, abs=1e-9)

    def test_worked_example_uniform_prior(self):
        d1 = dist(("A", "B"), (0.6, 0.4))
        d2 = dist(("A", "B"), (0.3, 0.7))
        out = fuse([d1, d2], uniform_prior(_space2()))
        assert out.probs == pytest.approx((0.3913, 0.6087), abs=1e-4)

    def test_worked_example_skewed_prior(self):
        d = dist(("A", "B"), (0.6, 0.4))
        prior = pinned_prior({"A": 0.8, "B": 0.2}, _space2())
        out = fuse([d, d], prior)
        assert out.probs == pytest.approx((0.36, 0.64), abs=1e-4)

    def test_permutation_invariance(self):
        rng = random.Random(1)
        dists = [_random_dist(rng, 4) for _ in range(3)]
        prior = _random_prior(rng, 4)
        a = fuse(dists, prior)
        b = fuse(list(reversed(dists)), prior)
        assert a.probs == pytest.approx(b.probs, abs=1e-12)

    def test_log_space_matches_direct_product(self):
        rng = random.Random(2)
        for _ in range(200):
            k = rng.randint(2, 6)
            n = rng.randint(1, 3)
            dists = [_random_dist(rng, k, floor=1e-6) for _ in range(n)]
            prior = _random_prior(rng, k)
            got = fuse(dists, prior)
            want = direct_fuse(dists, prior)
            assert got.probs == pytest.approx(want, abs=1e-9)

    def test_uniform_prior_equals_normalized_product(self):
        rng = random.Random(3)
        for _ in range(50):
            k = rng.randint(2, 5)
            dists = [_random_dist(rng, k, floor=1e-6) for _ in range(2)]
            got = fuse(dists, uniform_prior(_space_k(k)))
            raw = np.prod([d.probs for d in dists], axis=0)
            want = raw / raw.sum()
            assert got.probs == pytest.approx(tuple(want), abs=1e-9)

    def test_monotonicity_pre_normalization(self):
        # Raising one expert's mass on a label never lowers the fused
        # unnormalized mass on that label.
        d1 = dist(("A", "B"), (0.3, 0.7))
        d2_lo = dist(("A", "B"), (0.4, 0.6))
        d2_hi = dist(("A", "B"), (0.5, 0.5))
        prior = uniform_prior(_space2())

        def unnormalized_a(d2):
            return (d1.probs[0] * d2.probs[0]) / prior.probs.probs[0]

        assert unnormalized_a(d2_hi) >= unnormalized_a(d2_lo)
        # And the fused (normalized) probability of A also rises here.
        assert fuse([d1, d2_hi], prior).probs[0] >= fuse([d1, d2_lo], prior).probs[0]

    def test_exact_bayes_posterior_on_toy_joint(self):
        # Build a discrete generative model where two observed prompt
        # variables are conditionally independent given the label; the
        # fused per-prompt posteriors must equal the exact joint posterior.
        rng = random.Random(4)
        for _ in range(50):
            k = rng.randint(2, 4)
            prior_w = [rng.uniform(0.2, 1.0) for _ in range(k)]
            total = sum(prior_w)
            prior_p = [w / total for w in prior_w]
            # Conditional likelihood tables for two observations with 3 values.
            like1 = [[rng.uniform(0.05, 1.0) for _ in range(3)] for _ in range(k)]
            like2 = [[rng.uniform(0.05, 1.0) for _ in range(3)] for _ in range(k)]
            for row in like1 + like2:
                s = sum(row)
                row[:] = [x / s for x in row]
            v1, v2 = rng.randrange(3), rng.randrange(3)

            def posterior(like, v):
                raw = [prior_p[i] * like[i][v] for i in range(k)]
                s = sum(raw)
                return [x / s for x in raw]

            p1 = posterior(like1, v1)
            p2 = posterior(like2, v2)
            joint_raw = [prior_p[i] * like1[i][v1] * like2[i][v2] for i in range(k)]
            s = sum(joint_raw)
            exact = [x / s for x in joint_raw]

            space = _space_k(k)
            fused = fuse(
                [dist(space.labels, p1), dist(space.labels, p2)],
                pinned_prior(dict(zip(space.labels, prior_p)), space),
            )
            assert fused.probs == pytest.approx(exact, abs=1e-9)

    def test_zero_prior_entry_rejected(self):
        d = dist(("A", "B"), (0.5, 0.5))
        prior = uniform_prior(_space2())
        bad = type(prior)(probs=dist(("A", "B"), (1.0, 0.0)), source="pinned")
        with pytest.raises(ConfigError, match="zero"):
            fuse([d, d], bad)

    def test_empty_dists_rejected(self):
        with pytest.raises(ConfigError):
            fuse([], uniform_prior(_space2()))

    def test_label_order_mismatch_rejected(self):
        d1 = dist(("A", "B"), (0.5, 0.5))
        d2 = dist(("B", "A"), (0.5, 0.5))
        with pytest.raises(ValidationError, match="mismatch"):
            fuse([d1, d2], uniform_prior(_space2()))


class TestAverageFuse:
    def test_identical_inputs(self):
        d = dist(("A", "B"), (0.2, 0.8))
        assert average_fuse([d, d]).probs == pytest.approx(d.probs, abs=1e-12)

    def test_symmetric(self):
        out = average_fuse([dist(("A", "B"), (1.0, 0.0)), dist(("A", "B"), (0.0, 1.0))])
        assert out.probs == pytest.approx((0.5, 0.5), abs=1e-12)

    def test_hand_mean(self):
        out = average_fuse([dist(("A", "B"), (0.6, 0.4)), dist(("A", "B"), (0.3, 0.7))])
        assert out.probs == pytest.approx((0.45, 0.55), abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            average_fuse([])


class TestPredict:
    def test_argmax(self):
        d = dist(("Negative", "Neutral", "Positive"), (0.2, 0.3, 0.5))
        assert predict(d) == "Positive"

    def test_tie_goes_to_first_label(self):
        assert predict(dist(("A", "B"), (0.5, 0.5))) == "A"

    def test_fused_example_prediction(self):
        out = fuse(
            [dist(("A", "B"), (0.6, 0.4)), dist(("A", "B"), (0.3, 0.7))],
            uniform_prior(_space2()),
        )
        assert predict(out) == "B"

    def test_invariant_under_monotone_transform(self):
        rng = random.Random(9)
        for _ in range(50):
            k = rng.randint(2, 6)
            d = _random_dist(rng, k)
            # argmax after softening/sharpening is unchanged
            powed = [p ** 0.37 for p in d.probs]
            total = sum(powed)
            soft = dist(d.labels, [p / total for p in powed])
            assert predict(d) == predict(soft)


class TestPriors:
    def test_empirical_add_one_smoothing(self):
        prior = empirical_prior({"Negative": 2, "Positive": 6}, _space2_named())
        # (2+1)/(8+2) and (6+1)/(8+2)
        assert prior.probs.probs == pytest.approx((0.3, 0.7), abs=1e-12)
        assert prior.source == "empirical-train"

    def test_empirical_never_zero(self):
        prior = empirical_prior({}, SPACE3)
        assert all(p > 0 for p in prior.probs.probs)

    def test_pinned_missing_label(self):
        with pytest.raises(ConfigError, match="missing"):
            pinned_prior({"Negative": 0.5}, _space2_named())


def _space2():
    return LabelSpace(name="ab", kind="coarse", labels=("A", "B"),
                      verbalizer={"A": "a", "B": "b"})


def _space2_named():
    return LabelSpace(name="np", kind="coarse", labels=("Negative", "Positive"),
                      verbalizer={"Negative": "terrible", "Positive": "great"})


def _space_k(k):
    labels = tuple(f"L{i}" for i in range(k))
    return LabelSpace(name=f"k{k}", kind="coarse", labels=labels,
                      verbalizer={l: l.lower() for l in labels})


def _random_dist(rng, k, floor=0.0):
    w = [max(rng.uniform(0, 1), floor) for _ in range(k)]
    total = sum(w)
    return dist(tuple(f"L{i}" for i in range(k)), tuple(x / total for x in w))


def _random_prior(rng, k):
    space = _space_k(k)
    w = {l: rng.uniform(0.1, 1.0) for l in space.labels}
    return pinned_prior(w, space)
