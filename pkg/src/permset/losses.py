"""Per-slot costs, the permutation step and the three-term training loss.

The state loss of a slot is smooth-L1 on the four box coordinates plus binary
cross-entropy on the existence score for a real target; a padding target only
contributes the score term with label 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .assignment import Assignment, all_permutations, brute_force_assignment, hungarian, perm_rank
from .elements import GroundTruthSet
from .model import NetworkOutput
from .nn import log_softmax, sigmoid, softmax

SCORE_EPS = 1e-12
ASSIGNMENT_MODES = ("hungarian_f1", "brute_f1f2", "fixed_order")


class PaddedTargets(NamedTuple):
    boxes: np.ndarray  # (M, 4); rows past the real count are zeros and ignored
    mask: np.ndarray  # (M,) bool, True for real targets


TARGET_LAYOUTS = ("annotation", "identity")


def pad_ground_truth(gt: GroundTruthSet, M: int, layout: str = "annotation") -> PaddedTargets:
    """Targets for M slots: real elements first in annotation order, dummies after.

    With ``layout="identity"`` each element instead sits at the index given by
    its identity tag and dummies fill the unused indices, so a target index
    names the same instance in every image.
    """
    if layout not in TARGET_LAYOUTS:
        raise ValueError(f"unknown target layout {layout!r}; expected one of {TARGET_LAYOUTS}")
    if len(gt) > M:
        raise ValueError(f"ground truth has {len(gt)} elements, more than M={M}")
    boxes = np.zeros((M, 4))
    mask = np.zeros(M, dtype=bool)
    if layout == "annotation":
        rows = list(range(len(gt)))
    else:
        rows = list(gt.identities or [])
        if len(rows) != len(gt) or len(set(rows)) != len(rows) or any(not 0 <= r < M for r in rows):
            raise ValueError(f"identity layout needs distinct identities in [0, {M}), got {gt.identities}")
    if rows:
        boxes[rows] = gt.boxes()
        mask[rows] = True
    return PaddedTargets(boxes, mask)


def smooth_l1(u):
    a = np.abs(u)
    return np.where(a < 1.0, 0.5 * u * u, a - 0.5)


def smooth_l1_grad(u):
    return np.where(np.abs(u) < 1.0, u, np.sign(u))


def clamped_sigmoid(z):
    return np.clip(sigmoid(z), SCORE_EPS, 1.0 - SCORE_EPS)


def bce_with_logit(z, y):
    """Binary cross-entropy of a clamped sigmoid; returns (loss, dloss/dz)."""
    raw = sigmoid(z)
    s = np.clip(raw, SCORE_EPS, 1.0 - SCORE_EPS)
    loss = -(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    inside = (raw > SCORE_EPS) & (raw < 1.0 - SCORE_EPS)
    return loss, np.where(inside, raw - y, 0.0)


def element_cost(target_box, is_real: bool, slot, box_scale: float = 1.0) -> float:
    """Cost of explaining one (possibly padding) target with one slot state.

    The box residual enters the smooth-L1 multiplied by ``box_scale``; 1 keeps
    it in normalized image units.
    """
    slot = np.asarray(slot, dtype=np.float64)
    if not is_real:
        return float(bce_with_logit(slot[4], 0.0)[0])
    box = float(np.sum(smooth_l1(box_scale * (slot[:4] - np.asarray(target_box, dtype=np.float64)))))
    return box + float(bce_with_logit(slot[4], 1.0)[0])


def cost_matrix(boxes: np.ndarray, mask: np.ndarray, o1: np.ndarray, box_scale: float = 1.0) -> np.ndarray:
    """``C[i, j] = element_cost(target i, slot j)`` for all pairs, vectorized."""
    diff = box_scale * (o1[None, :, :4] - boxes[:, None, :])
    box_cost = smooth_l1(diff).sum(axis=2)
    pos, _ = bce_with_logit(o1[:, 4], 1.0)
    neg, _ = bce_with_logit(o1[:, 4], 0.0)
    return np.where(mask[:, None], box_cost + pos[None, :], neg[None, :])


def _canonical_dummies(mapping: Sequence[int], mask: np.ndarray) -> Assignment:
    # Padding rows share identical cost rows, so giving them their slots in
    # ascending order leaves the cost unchanged and makes the permutation unique.
    mapping = list(mapping)
    dummy_rows = [i for i in range(len(mapping)) if not mask[i]]
    slots = sorted(mapping[i] for i in dummy_rows)
    for i, j in zip(dummy_rows, slots):
        mapping[i] = j
    return tuple(mapping)


def assign_permutation(boxes: np.ndarray, mask: np.ndarray, output: NetworkOutput,
                       mode: str = "hungarian_f1", box_scale: float = 1.0) -> Tuple[Assignment, float]:
    """Best assignment of padded targets to slots; returns ``(mapping, objective)``.

    ``mapping[i]`` is the slot that explains target ``i``.
    """
    M = output.max_cardinality
    costs = cost_matrix(boxes, mask, output.o1, box_scale)
    if mode == "hungarian_f1":
        mapping, total = hungarian(costs)
        mapping = _canonical_dummies(mapping, mask)
        return mapping, float(costs[np.arange(M), list(mapping)].sum())
    if mode == "brute_f1f2":
        return brute_force_assignment(costs, -log_softmax(output.o2))
    if mode == "fixed_order":
        ident = tuple(range(M))
        return ident, float(np.trace(costs))
    raise ValueError(f"unknown assignment mode {mode!r}; expected one of {ASSIGNMENT_MODES}")


@dataclass
class LossParts:
    f1: float
    f2: float
    f3: float

    @property
    def total(self) -> float:
        return self.f1 + self.f2 + self.f3


def total_loss(boxes: np.ndarray, mask: np.ndarray, output: NetworkOutput, mapping: Sequence[int],
               use_permutation_head: bool = True, f2_soft_target: Optional[np.ndarray] = None,
               box_scale: float = 1.0) -> Tuple[LossParts, NetworkOutput]:
    """State, permutation and cardinality losses for one sample at a fixed assignment.

    Returns the loss parts and the gradient with respect to each head, packed in
    a ``NetworkOutput``. ``f2_soft_target``, if given, is a distribution over
    permutation ranks used in place of the one-hot label of ``mapping``.
    """
    M = output.max_cardinality
    mapping = np.asarray(mapping)
    d_o1 = np.zeros_like(output.o1)

    slots = output.o1[mapping]  # row i: slot state matched to target i
    score_loss, score_grad = bce_with_logit(slots[:, 4], mask.astype(np.float64))
    diff = box_scale * (slots[:, :4] - boxes)
    box_loss = np.where(mask[:, None], smooth_l1(diff), 0.0)
    f1 = float(score_loss.sum() + box_loss.sum())
    d_o1[mapping, 4] = score_grad
    d_o1[mapping, :4] = np.where(mask[:, None], box_scale * smooth_l1_grad(diff), 0.0)

    d_o2 = np.zeros_like(output.o2)
    f2 = 0.0
    if use_permutation_head:
        logp = log_softmax(output.o2)
        if f2_soft_target is None:
            target = np.zeros_like(output.o2)
            target[perm_rank(mapping.tolist())] = 1.0
        else:
            target = np.asarray(f2_soft_target, dtype=np.float64)
        f2 = float(-(target * logp).sum())
        d_o2 = softmax(output.o2) * target.sum() - target

    m = int(mask.sum())
    logq = log_softmax(output.alpha)
    f3 = float(-logq[m])
    d_alpha = softmax(output.alpha)
    d_alpha[m] -= 1.0
    return LossParts(f1, f2, f3), NetworkOutput(d_alpha, d_o1, d_o2)


def permutation_costs(boxes: np.ndarray, mask: np.ndarray, output: NetworkOutput,
                      box_scale: float = 1.0) -> np.ndarray:
    """State-loss objective of every permutation, indexed by rank."""
    costs = cost_matrix(boxes, mask, output.o1, box_scale)
    perms = all_permutations(output.max_cardinality)
    return costs[np.arange(costs.shape[0]), perms].sum(axis=1)
