import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permset.inference import (InferenceConfig, best_permutation, infer, map_inference, map_objectives,
                               select_unit, threshold_inference)
from permset.model import NetworkOutput


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def head(alpha, scores, rng=None):
    M = len(scores)
    rng = rng if rng is not None else np.random.default_rng(0)
    o1 = np.column_stack([rng.uniform(0, 0.5, size=(M, 4)), logit(scores)])
    return NetworkOutput(np.asarray(alpha, dtype=float), o1, np.zeros(math.factorial(M)))


def exhaustive_map(alpha, scores, U):
    """Minimize the objective over every cardinality and every subset of that size."""
    log_p = np.asarray(alpha) - math.log(sum(math.exp(a) for a in alpha))
    s = np.clip(scores, 1e-12, 1 - 1e-12)
    best = (math.inf, None)
    for m in range(len(alpha)):
        for subset in itertools.combinations(range(len(scores)), m):
            val = -log_p[m] - m * math.log(U) - sum(math.log(s[j]) for j in subset)
            if val < best[0] - 1e-12:
                best = (val, subset)
    return best


# Objectives of the worked example, evaluated term by term with math.log:
#   m=0: -ln .1
#   m=1: -ln .2 - ln 2 - ln .9
#   m=2: -ln .6 - 2 ln 2 - ln .9 - ln .8
#   m=3: -ln .1 - 3 ln 2 - ln .9 - ln .8 - ln .2
WORKED_OBJECTIVES = (2.3025850929940455, 1.0216512475319812, -0.5469646703818638, 2.161085530720346)


def test_worked_example():
    out = head(np.log([0.1, 0.2, 0.6, 0.1]), [0.9, 0.8, 0.2])
    pred = map_inference(out, InferenceConfig(U=2.0))
    np.testing.assert_allclose(pred.objectives, WORKED_OBJECTIVES, rtol=0, atol=1e-12)
    assert pred.cardinality == 2
    assert sorted(pred.scores()) == pytest.approx([0.8, 0.9], abs=1e-12)


def test_dominant_empty_cardinality():
    rng = np.random.default_rng(1)
    for _ in range(20):
        alpha = np.array([30.0, -1.0, -2.0, -3.0, -4.0])
        out = head(alpha, rng.uniform(0.5, 0.999, size=4), rng)
        assert map_inference(out, InferenceConfig(U=0.1)).cardinality == 0


def test_slot_order_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        scores = rng.uniform(0.01, 0.99, size=5)
        alpha = rng.normal(size=6)
        out = head(alpha, scores, rng)
        perm = rng.permutation(5)
        shuffled = NetworkOutput(out.alpha, out.o1[perm], out.o2)
        a = map_inference(out, InferenceConfig(U=0.5))
        b = map_inference(shuffled, InferenceConfig(U=0.5))
        assert a.cardinality == b.cardinality
        assert sorted(a.scores()) == sorted(b.scores())
        assert sorted(map(tuple, a.boxes())) == sorted(map(tuple, b.boxes()))


def test_map_matches_subset_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        M = int(rng.integers(1, 7))
        alpha = rng.normal(scale=2.0, size=M + 1)
        scores = rng.uniform(size=M)
        U = float(np.exp(rng.uniform(-3, 2)))
        out = head(alpha, scores, rng)
        pred = map_inference(out, InferenceConfig(U=U))
        val, subset = exhaustive_map(alpha, 1 / (1 + np.exp(-out.o1[:, 4])), U)
        assert abs(pred.objectives.min() - val) <= 1e-12
        assert pred.cardinality == len(subset)


def test_tie_prefers_smaller_cardinality():
    # p(0) = p(1) and the single element costs nothing once U * s = 1
    out = head([0.0, 0.0], [0.5])
    pred = map_inference(out, InferenceConfig(U=2.0))
    assert abs(pred.objectives[0] - pred.objectives[1]) < 1e-12
    assert pred.cardinality == 0


def test_unit_volume_drops_u_term():
    alpha = np.array([0.3, -0.2, 0.1])
    scores = np.array([0.7, 0.4])
    obj = map_objectives(alpha, scores, 1.0)
    log_p = alpha - np.log(np.exp(alpha).sum())
    np.testing.assert_allclose(obj, -log_p - np.array([0, np.log(0.7), np.log(0.7) + np.log(0.4)]), atol=1e-14)


def test_extreme_scores_stay_finite():
    out = NetworkOutput(np.zeros(3), np.array([[0, 0, 0.1, 0.1, 800.0], [0, 0, 0.1, 0.1, -800.0]]), np.zeros(2))
    pred = map_inference(out, InferenceConfig(U=0.1))
    assert np.all(np.isfinite(pred.objectives))


def test_negative_size_predictions_are_clipped():
    out = NetworkOutput(np.array([-9.0, 9.0]), np.array([[0.2, 0.2, -0.1, 0.3, 5.0]]), np.zeros(1))
    pred = map_inference(out)
    assert pred.elements[0].w == 0.0 and pred.elements[0].h == 0.3


@pytest.mark.parametrize("kwargs", [{"U": 0.0}, {"U": -1.0}, {"mode": "greedy"}, {"mode": "threshold", "tau": 1.0},
                                    {"mode": "threshold", "tau": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        InferenceConfig(**kwargs)


# -- threshold mode -------------------------------------------------------------------

def test_threshold_extremes():
    rng = np.random.default_rng(4)
    out = head(np.zeros(5), rng.uniform(0.01, 0.99, size=4), rng)
    assert threshold_inference(out, 0.999999).cardinality == 0
    assert threshold_inference(out, 1e-9).cardinality == 4


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=1, max_size=8), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_threshold_monotone(logits, tau, step):
    M = len(logits)
    o1 = np.zeros((M, 5))
    o1[:, 2:4] = 0.1
    o1[:, 4] = logits
    out = NetworkOutput(np.zeros(M + 1), o1, np.zeros(1))
    low = set(threshold_inference(out, tau).slots)
    high = set(threshold_inference(out, min(tau + step, 0.999)).slots)
    assert high <= low


def test_infer_dispatch():
    out = head(np.log([0.1, 0.2, 0.6, 0.1]), [0.9, 0.8, 0.2])
    out.o2[4] = 3.0
    m = infer(out, InferenceConfig(U=2.0))
    t = infer(out, InferenceConfig(mode="threshold", tau=0.5), with_permutation=False)
    assert m.cardinality == 2 and m.ordering == 4
    # rank 4 of 3 is (2, 0, 1): slots 0 and 1 explain targets 1 and 2
    assert m.slots == [0, 1] and m.labels == [1, 2]
    assert t.cardinality == 2 and t.ordering is None and t.labels is None
    assert t.objectives is None


# -- best permutation ----------------------------------------------------------------

def test_best_permutation_cases():
    o2 = np.zeros(6)
    assert best_permutation(NetworkOutput(np.zeros(4), np.zeros((3, 5)), o2)) == 0
    o2[3] = 10.0
    assert best_permutation(NetworkOutput(np.zeros(4), np.zeros((3, 5)), o2)) == 3


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-100, 100))
def test_best_permutation_shift_invariant(seed, shift):
    o2 = np.random.default_rng(seed).normal(size=24)
    a = best_permutation(NetworkOutput(np.zeros(5), np.zeros((4, 5)), o2))
    b = best_permutation(NetworkOutput(np.zeros(5), np.zeros((4, 5)), o2 + shift))
    assert a == b


def test_select_unit_prefers_the_value_that_recovers_the_truth():
    # two confident slots and one at s = 0.3: a small U keeps nothing, a large one admits the false positive
    alpha = np.log([0.05, 0.05, 0.5, 0.4])
    o1 = np.array([[0.1, 0.1, 0.2, 0.2, 4.0], [0.6, 0.6, 0.2, 0.2, 4.0], [0.3, 0.6, 0.1, 0.1, -0.85]])
    outputs = NetworkOutput(alpha[None], o1[None], np.zeros((1, 6)))
    gts = [o1[:2, :4]]
    U, f1s = select_unit(outputs, gts, [0.1, 1.0, 100.0])
    assert U == 1.0
    assert f1s == pytest.approx([0.0, 1.0, 0.8])
    with pytest.raises(ValueError):
        select_unit(outputs, gts, [])
