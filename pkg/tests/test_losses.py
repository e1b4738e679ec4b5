import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from permset.assignment import perm_rank
from permset.elements import GroundTruthSet, SetElement
from permset.losses import (assign_permutation, cost_matrix, element_cost, pad_ground_truth, permutation_costs,
                            total_loss)
from permset.model import NetworkOutput, PermSetNet
from permset.nn import ShapeError

BIG = 60.0  # logit far past the 1e-12 score clamp


def random_output(rng, M):
    return NetworkOutput(rng.normal(size=M + 1), rng.normal(scale=0.5, size=(M, 5)) + [0.4, 0.4, 0.2, 0.2, 0.0],
                         rng.normal(size=math.factorial(M)))


def random_targets(rng, M, m=None):
    m = int(rng.integers(0, M + 1)) if m is None else m
    gt = GroundTruthSet.from_boxes(rng.uniform(0.05, 0.5, size=(m, 4)))
    return gt, pad_ground_truth(gt, M)


# -- padding -----------------------------------------------------------------

def test_pad_empty():
    boxes, mask = pad_ground_truth(GroundTruthSet(), 3)
    assert boxes.shape == (3, 4)
    np.testing.assert_array_equal(mask, [False, False, False])


def test_pad_full_and_partial():
    gt = GroundTruthSet.from_boxes([[0.1, 0.1, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]])
    boxes, mask = pad_ground_truth(gt, 4)
    np.testing.assert_array_equal(mask, [True, True, False, False])
    np.testing.assert_array_equal(boxes[:2], gt.boxes())
    _, mask = pad_ground_truth(gt, 2)
    assert mask.all()
    with pytest.raises(ValueError):
        pad_ground_truth(gt, 1)


def test_pad_identity_layout():
    gt = GroundTruthSet.from_boxes([[0.1, 0.1, 0.2, 0.2], [0.5, 0.5, 0.1, 0.1]], identities=[3, 1])
    boxes, mask = pad_ground_truth(gt, 4, layout="identity")
    np.testing.assert_array_equal(mask, [False, True, False, True])
    np.testing.assert_array_equal(boxes[[3, 1]], gt.boxes())
    assert not boxes[[0, 2]].any()
    for bad in ([1, 1], [0, 4], None):
        with pytest.raises(ValueError, match="identity layout"):
            pad_ground_truth(GroundTruthSet(gt.elements, bad), 4, layout="identity")
    with pytest.raises(ValueError, match="layout"):
        pad_ground_truth(gt, 4, layout="sorted")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_identity_layout_makes_permutation_label_order_free(seed):
    rng = np.random.default_rng(seed)
    out = random_output(rng, 4)
    m = int(rng.integers(1, 5))
    ids = [int(i) for i in rng.permutation(4)[:m]]
    gt, _ = random_targets(rng, 4, m=m)
    order = rng.permutation(m)
    a = GroundTruthSet(gt.elements, ids)
    b = GroundTruthSet([gt.elements[i] for i in order], [ids[i] for i in order])
    ra = assign_permutation(*pad_ground_truth(a, 4, "identity"), out)[0]
    rb = assign_permutation(*pad_ground_truth(b, 4, "identity"), out)[0]
    assert perm_rank(ra) == perm_rank(rb)


def test_set_element_validation():
    with pytest.raises(ValueError):
        SetElement(0, 0, -0.1, 0.1)
    with pytest.raises(ValueError):
        SetElement(0, 0, 0.1, 0.1, s=1.5)


# -- element cost -------------------------------------------------------------

def test_element_cost_perfect():
    box = [0.2, 0.3, 0.1, 0.4]
    assert element_cost(box, True, [*box, BIG]) < 1e-9
    assert element_cost(box, False, [0.9, 0.9, 0.9, 0.9, -BIG]) < 1e-9


def test_element_cost_smooth_l1_branches():
    box = np.zeros(4)
    # the score term alone, for a clamped-perfect score, is ~1e-12
    assert element_cost(box, True, [0.5, 0, 0, 0, BIG]) == pytest.approx(0.125, abs=1e-9)
    assert element_cost(box, True, [2.0, 0, 0, 0, BIG]) == pytest.approx(1.5, abs=1e-9)
    assert element_cost(box, True, [-2.0, 0.5, 0, 0, BIG]) == pytest.approx(1.625, abs=1e-9)


def test_box_scale_multiplies_residual():
    box = np.zeros(4)
    assert element_cost(box, True, [0.25, 0, 0, 0, BIG], box_scale=2.0) == pytest.approx(0.125, abs=1e-9)
    assert element_cost(box, True, [0.25, 0, 0, 0, BIG], box_scale=8.0) == pytest.approx(1.5, abs=1e-9)
    assert element_cost(box, False, [5, 5, 5, 5, 0.0], box_scale=8.0) == pytest.approx(math.log(2))


def test_dummy_cost_ignores_box():
    assert element_cost([0, 0, 0, 0], False, [5, 5, 5, 5, 0.0]) == pytest.approx(math.log(2))


def test_cost_matrix_matches_element_cost():
    rng = np.random.default_rng(3)
    out = random_output(rng, 4)
    gt, (boxes, mask) = random_targets(rng, 4, m=2)
    for scale in (1.0, 64.0):
        c = cost_matrix(boxes, mask, out.o1, scale)
        for i in range(4):
            for j in range(4):
                assert c[i, j] == pytest.approx(element_cost(boxes[i], mask[i], out.o1[j], scale), abs=1e-12)


# -- assignment step ------------------------------------------------------------

def test_identical_slots_any_permutation():
    o1 = np.tile([0.3, 0.3, 0.2, 0.2, 0.5], (3, 1))
    out = NetworkOutput(np.zeros(4), o1, np.zeros(6))
    gt = GroundTruthSet.from_boxes([[0.1, 0.1, 0.1, 0.1], [0.6, 0.6, 0.2, 0.2]])
    boxes, mask = pad_ground_truth(gt, 3)
    _, cost = assign_permutation(boxes, mask, out)
    _, ident = assign_permutation(boxes, mask, out, "fixed_order")
    assert cost == pytest.approx(ident, abs=1e-12)


def test_single_target_goes_to_matching_slot():
    target = [0.4, 0.2, 0.3, 0.3]
    o1 = np.array([[0.1, 0.1, 0.1, 0.1, -4.0],
                   [0.7, 0.7, 0.2, 0.2, -3.0],
                   [*target, 3.0]])
    out = NetworkOutput(np.zeros(4), o1, np.zeros(6))
    boxes, mask = pad_ground_truth(GroundTruthSet.from_boxes([target]), 3)
    # oracle: objective of every permutation, spelled out by hand
    totals = {}
    for perm in itertools.permutations(range(3)):
        total = 0.0
        for i, j in enumerate(perm):
            s = 1.0 / (1.0 + math.exp(-o1[j, 4]))
            if mask[i]:
                u = o1[j, :4] - boxes[i]
                total += sum(0.5 * v * v if abs(v) < 1 else abs(v) - 0.5 for v in u) - math.log(s)
            else:
                total += -math.log(1.0 - s)
        totals[perm] = total
    best = min(totals, key=totals.get)
    assert best[0] == 2
    mapping, cost = assign_permutation(boxes, mask, out)
    assert mapping[0] == 2
    assert cost == pytest.approx(totals[best], abs=1e-12)
    np.testing.assert_allclose(sorted(totals.values()), sorted(permutation_costs(boxes, mask, out)), atol=1e-12)


def test_fixed_order_is_identity():
    rng = np.random.default_rng(5)
    out = random_output(rng, 4)
    _, (boxes, mask) = random_targets(rng, 4)
    assert assign_permutation(boxes, mask, out, "fixed_order")[0] == (0, 1, 2, 3)


def test_dummy_slots_are_canonical():
    rng = np.random.default_rng(9)
    for _ in range(50):
        out = random_output(rng, 4)
        _, (boxes, mask) = random_targets(rng, 4)
        mapping, _ = assign_permutation(boxes, mask, out)
        dummy_slots = [mapping[i] for i in range(4) if not mask[i]]
        assert dummy_slots == sorted(dummy_slots)


def test_brute_mode_minimizes_full_objective():
    rng = np.random.default_rng(11)
    for _ in range(30):
        out = random_output(rng, 3)
        _, (boxes, mask) = random_targets(rng, 3)
        mapping, cost = assign_permutation(boxes, mask, out, "brute_f1f2")
        logp = out.o2 - np.log(np.exp(out.o2).sum())
        full = permutation_costs(boxes, mask, out) - logp
        assert cost == pytest.approx(full.min(), abs=1e-12)
        assert full[perm_rank(mapping)] == pytest.approx(full.min(), abs=1e-12)


def test_unknown_mode():
    rng = np.random.default_rng(0)
    out = random_output(rng, 2)
    _, (boxes, mask) = random_targets(rng, 2)
    with pytest.raises(ValueError):
        assign_permutation(boxes, mask, out, "greedy")


# -- total loss -------------------------------------------------------------------

def test_perfect_prediction_loss_vanishes():
    gt = GroundTruthSet.from_boxes([[0.1, 0.2, 0.3, 0.3], [0.5, 0.5, 0.2, 0.1]])
    boxes, mask = pad_ground_truth(gt, 4)
    o1 = np.zeros((4, 5))
    o1[:, :4] = boxes
    o1[:, 4] = np.where(mask, BIG, -BIG)
    alpha = np.full(5, -BIG)
    alpha[2] = BIG
    o2 = np.full(24, -BIG)
    o2[0] = BIG
    parts, _ = total_loss(boxes, mask, NetworkOutput(alpha, o1, o2), (0, 1, 2, 3))
    assert parts.total < 1e-6


def test_uniform_cardinality_term():
    rng = np.random.default_rng(0)
    out = random_output(rng, 4)
    out.alpha[:] = 0.3
    _, (boxes, mask) = random_targets(rng, 4)
    parts, _ = total_loss(boxes, mask, out, tuple(range(4)))
    assert parts.f3 == pytest.approx(math.log(5), abs=1e-12)
    assert round(parts.f3, 4) == 1.6094


def _head_grad_error(boxes, mask, out, mapping, use_perm, soft=None, h=1e-6, box_scale=1.0):
    _, grads = total_loss(boxes, mask, out, mapping, use_perm, soft, box_scale)
    worst = 0.0
    for name in ("alpha", "o1", "o2"):
        arr = getattr(out, name)
        g = getattr(grads, name)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = total_loss(boxes, mask, out, mapping, use_perm, soft, box_scale)[0].total
            flat[i] = old - h
            lm = total_loss(boxes, mask, out, mapping, use_perm, soft, box_scale)[0].total
            flat[i] = old
            num = (lp - lm) / (2 * h)
            worst = max(worst, abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num)))
    return worst


@pytest.mark.parametrize("use_perm", [True, False])
def test_head_gradients_finite_differences(use_perm):
    rng = np.random.default_rng(21)
    for _ in range(5):
        out = random_output(rng, 3)
        _, (boxes, mask) = random_targets(rng, 3)
        mapping, _ = assign_permutation(boxes, mask, out)
        assert _head_grad_error(boxes, mask, out, mapping, use_perm) < 1e-4


def test_scaled_box_gradients():
    # at scale 64 most residuals sit on the linear branch of the smooth-L1
    rng = np.random.default_rng(22)
    for _ in range(5):
        out = random_output(rng, 3)
        _, (boxes, mask) = random_targets(rng, 3)
        mapping, _ = assign_permutation(boxes, mask, out, box_scale=64.0)
        assert _head_grad_error(boxes, mask, out, mapping, True, box_scale=64.0) < 1e-4


def test_soft_target_gradients():
    rng = np.random.default_rng(2)
    out = random_output(rng, 3)
    _, (boxes, mask) = random_targets(rng, 3)
    soft = rng.dirichlet(np.ones(6))
    assert _head_grad_error(boxes, mask, out, (1, 0, 2), True, soft) < 1e-4


def test_permutation_head_off_has_zero_gradient():
    rng = np.random.default_rng(4)
    out = random_output(rng, 3)
    _, (boxes, mask) = random_targets(rng, 3)
    parts, grads = total_loss(boxes, mask, out, (2, 0, 1), use_permutation_head=False)
    assert parts.f2 == 0.0
    assert not grads.o2.any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_loss_nonnegative(seed, M):
    rng = np.random.default_rng(seed)
    out = random_output(rng, M)
    out.o1 *= 5
    _, (boxes, mask) = random_targets(rng, M)
    mapping, _ = assign_permutation(boxes, mask, out)
    parts, _ = total_loss(boxes, mask, out, mapping)
    assert parts.f1 >= 0 and parts.f2 >= 0 and parts.f3 >= 0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_ground_truth_order_invariance(seed, M):
    rng = np.random.default_rng(seed)
    out = random_output(rng, M)
    gt, (boxes, mask) = random_targets(rng, M, m=M)
    perm = rng.permutation(M)
    shuffled = GroundTruthSet([gt.elements[i] for i in perm])
    b2, m2 = pad_ground_truth(shuffled, M)
    map1, c1 = assign_permutation(boxes, mask, out)
    map2, c2 = assign_permutation(b2, m2, out)
    assert abs(c1 - c2) < 1e-10
    l1 = total_loss(boxes, mask, out, map1, use_permutation_head=False)[0].total
    l2 = total_loss(b2, m2, out, map2, use_permutation_head=False)[0].total
    assert abs(l1 - l2) < 1e-10


def test_fixed_order_depends_on_annotation_order():
    rng = np.random.default_rng(8)
    changed = 0
    for _ in range(50):
        out = random_output(rng, 3)
        gt, (boxes, mask) = random_targets(rng, 3, m=3)
        shuffled = GroundTruthSet(gt.elements[::-1])
        b2, m2 = pad_ground_truth(shuffled, 3)
        c1 = assign_permutation(boxes, mask, out, "fixed_order")[1]
        c2 = assign_permutation(b2, m2, out, "fixed_order")[1]
        changed += abs(c1 - c2) > 1e-10
    assert changed >= 45


# -- model plumbing --------------------------------------------------------------------

def test_model_head_shapes_and_round_trip():
    net = PermSetNet(M=3, in_channels=2, height=8, width=12, conv_channels=4, hidden=16, seed=1)
    x = np.random.default_rng(0).normal(size=(2, 2, 8, 12))
    out = net.forward(x)
    assert out.alpha.shape == (2, 4) and out.o1.shape == (2, 3, 5) and out.o2.shape == (2, 6)
    clone = PermSetNet.from_tensors(net.state_tensors())
    again = clone.forward(x)
    np.testing.assert_array_equal(again.o1, out.o1)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 8, 12)))
    with pytest.raises(ValueError):
        PermSetNet(M=9)
