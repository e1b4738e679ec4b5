"""Set elements: boxes ``(x, y, w, h)`` (top-left corner and size, normalized) plus a score."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class SetElement:
    x: float
    y: float
    w: float
    h: float
    s: float = 1.0

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: {self}")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self}")

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass
class GroundTruthSet:
    elements: List[SetElement] = field(default_factory=list)
    identities: Optional[List[int]] = None

    def __post_init__(self):
        if self.identities is not None and len(self.identities) != len(self.elements):
            raise ValueError("identities must align with elements")

    def __len__(self) -> int:
        return len(self.elements)

    def boxes(self) -> np.ndarray:
        if not self.elements:
            return np.zeros((0, 4))
        return np.stack([e.box for e in self.elements])

    @classmethod
    def from_boxes(cls, boxes, identities: Optional[Sequence[int]] = None) -> "GroundTruthSet":
        elems = [SetElement(*map(float, b)) for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 4)]
        return cls(elems, None if identities is None else [int(i) for i in identities])
