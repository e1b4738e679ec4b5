"""Set prediction from head outputs.

MAP mode picks the cardinality ``m`` and the ``m`` highest-scoring slots that
minimize ``-log p(m) - m log U - sum(log s)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .assignment import perm_unrank
from .elements import SetElement
from .losses import clamped_sigmoid
from .metrics import point_f1
from .model import NetworkOutput
from .nn import log_softmax, sigmoid

TIE_TOL = 1e-12


@dataclass
class InferenceConfig:
    U: float = 0.1
    mode: str = "map"  # or "threshold"
    tau: float = 0.5

    def __post_init__(self):
        if not self.U > 0:
            raise ValueError("U must be positive")
        if self.mode not in ("map", "threshold"):
            raise ValueError("mode must be 'map' or 'threshold'")
        if self.mode == "threshold" and not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")


@dataclass
class PredictedSet:
    elements: List[SetElement]
    slots: List[int]
    ordering: Optional[int] = None
    labels: Optional[List[int]] = None  # target index each chosen slot explains under ``ordering``
    objectives: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def cardinality(self) -> int:
        return len(self.elements)

    def boxes(self) -> np.ndarray:
        return np.array([[e.x, e.y, e.w, e.h] for e in self.elements]).reshape(-1, 4)

    def scores(self) -> np.ndarray:
        return np.array([e.s for e in self.elements])


def _elements(o1: np.ndarray, scores: np.ndarray, slots) -> List[SetElement]:
    out = []
    for j in slots:
        x, y, w, h = o1[j, :4]
        out.append(SetElement(float(x), float(y), max(float(w), 0.0), max(float(h), 0.0), float(scores[j])))
    return out


def map_objectives(alpha: np.ndarray, scores: np.ndarray, U: float) -> np.ndarray:
    """Objective for every m = 0..M given cardinality logits and (clamped) slot scores."""
    top = np.sort(scores)[::-1]
    cum = np.concatenate([[0.0], np.cumsum(np.log(top))])
    m = np.arange(len(alpha))
    return -log_softmax(alpha) - m * math.log(U) - cum


def map_inference(output: NetworkOutput, config: InferenceConfig = InferenceConfig()) -> PredictedSet:
    scores = clamped_sigmoid(output.o1[:, 4])
    obj = map_objectives(output.alpha, scores, config.U)
    best = obj.min()
    m_star = int(np.flatnonzero(obj <= best + TIE_TOL)[0])
    order = np.argsort(-scores, kind="stable")[:m_star]
    slots = [int(j) for j in order]
    return PredictedSet(_elements(output.o1, scores, slots), slots, objectives=obj)


def threshold_inference(output: NetworkOutput, tau: float) -> PredictedSet:
    scores = sigmoid(output.o1[:, 4])
    slots = [int(j) for j in np.argsort(-scores, kind="stable") if scores[j] > tau]
    return PredictedSet(_elements(output.o1, scores, slots), slots)


def best_permutation(output: NetworkOutput) -> int:
    # argmax of the logits equals argmax of their softmax; np.argmax keeps the lowest rank on ties
    return int(np.argmax(output.o2))


def slot_labels(rank: int, slots: List[int], M: int) -> List[int]:
    """Reorder by the permutation: slot ``mapping[i]`` is labelled ``i``."""
    mapping = perm_unrank(M, rank)
    inverse = {slot: i for i, slot in enumerate(mapping)}
    return [inverse[j] for j in slots]


def infer(output: NetworkOutput, config: InferenceConfig, with_permutation: bool = True) -> PredictedSet:
    if config.mode == "map":
        pred = map_inference(output, config)
    else:
        pred = threshold_inference(output, config.tau)
    if with_permutation:
        pred.ordering = best_permutation(output)
        pred.labels = slot_labels(pred.ordering, pred.slots, output.max_cardinality)
    return pred


def select_unit(outputs: NetworkOutput, gts: Sequence[np.ndarray], candidates: Sequence[float],
                iou_thresh: float = 0.5) -> Tuple[float, List[float]]:
    """Pick U from ``candidates`` by point-F1 of MAP predictions on a validation set.

    Returns the best U (the first on ties) and the F1 of every candidate.
    """
    if not len(candidates):
        raise ValueError("no candidate values for U")
    f1s = []
    for U in candidates:
        preds = [map_inference(outputs[i], InferenceConfig(U=U)) for i in range(len(outputs))]
        f1s.append(point_f1([(p.boxes(), p.scores()) for p in preds], gts, iou_thresh))
    return float(candidates[int(np.argmax(f1s))]), f1s
