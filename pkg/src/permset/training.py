"""Alternating optimization: per-sample assignment, then one Adam step on the batch."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Dict, IO, List, Optional, Sequence

import numpy as np

from .assignment import perm_rank
from .elements import GroundTruthSet
from .losses import ASSIGNMENT_MODES, TARGET_LAYOUTS, assign_permutation, pad_ground_truth, total_loss
from .model import NetworkOutput, PermSetNet
from .nn import Adam


@dataclass
class TrainConfig:
    M: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 32
    iterations: int = 1000
    seed: int = 0
    assignment_mode: str = "hungarian_f1"
    use_permutation_head: bool = True
    f2_target: str = "hard"  # "hard": current sample's permutation; "soft": histogram weights
    augment: bool = False  # random flips and transposes of each training image
    target_layout: str = "annotation"  # "identity": pad each target at its identity index
    box_scale: float = 1.0  # box residuals enter the smooth-L1 multiplied by this
    lr_drop_at: int = 0  # from this (absolute) iteration on, lr is multiplied by lr_drop; 0 never drops
    lr_drop: float = 0.1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.assignment_mode not in ASSIGNMENT_MODES:
            raise ValueError(f"assignment_mode must be one of {ASSIGNMENT_MODES}")
        if self.f2_target not in ("hard", "soft"):
            raise ValueError("f2_target must be 'hard' or 'soft'")
        if self.target_layout not in TARGET_LAYOUTS:
            raise ValueError(f"target_layout must be one of {TARGET_LAYOUTS}")
        if not self.box_scale > 0:
            raise ValueError("box_scale must be positive")
        if self.lr_drop_at < 0 or not self.lr_drop > 0:
            raise ValueError("lr_drop_at must be >= 0 and lr_drop positive")

    def lr_at(self, iteration: int) -> float:
        """Learning rate for the step with 0-based index ``iteration``."""
        if self.lr_drop_at and iteration >= self.lr_drop_at:
            return self.lr * self.lr_drop
        return self.lr

    def make_optimizer(self) -> Adam:
        return Adam(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)


class PermutationHistogram:
    """Counts of the best permutation found for each training instance.

    ``n_iterations`` is the total number of SGD iterations so far; the weight
    of a permutation is its count divided by that total.
    """

    def __init__(self) -> None:
        self.counts: Dict[int, Counter] = {}
        self.n_iterations = 0

    def record(self, instance: int, rank: int) -> None:
        self.counts.setdefault(instance, Counter())[rank] += 1

    def tick(self) -> None:
        self.n_iterations += 1

    def visits(self, instance: int) -> int:
        return sum(self.counts.get(instance, Counter()).values())

    def distribution(self, instance: int) -> Dict[int, float]:
        if instance not in self.counts:
            raise KeyError(f"instance {instance} has never been visited")
        n = max(self.n_iterations, 1)
        return {r: c / n for r, c in sorted(self.counts[instance].items())}

    def normalized(self, instance: int, n_ranks: int) -> np.ndarray:
        """Empirical permutation frequencies of one instance as a dense vector."""
        out = np.zeros(n_ranks)
        for r, c in self.counts.get(instance, {}).items():
            out[r] = c
        total = out.sum()
        return out / total if total else out

    def to_json(self) -> dict:
        return {
            "n_iterations": self.n_iterations,
            "instances": {str(i): {str(r): c for r, c in sorted(cnt.items())} for i, cnt in sorted(self.counts.items())},
        }

    @classmethod
    def from_json(cls, data: dict) -> "PermutationHistogram":
        h = cls()
        h.n_iterations = int(data["n_iterations"])
        for i, cnt in data["instances"].items():
            h.counts[int(i)] = Counter({int(r): int(c) for r, c in cnt.items()})
        return h


def permutation_distribution(histogram: PermutationHistogram, instance: int) -> Dict[int, float]:
    return histogram.distribution(instance)


@dataclass
class Batch:
    x: np.ndarray  # (B, C, H, W)
    boxes: np.ndarray  # (B, M, 4)
    mask: np.ndarray  # (B, M) bool
    ids: Sequence[int]


@dataclass
class StepResult:
    loss: float
    f1: float
    f2: float
    f3: float
    ranks: List[int] = field(default_factory=list)


def batch_loss(out: NetworkOutput, boxes: np.ndarray, mask: np.ndarray, mappings: Sequence[Sequence[int]],
               use_permutation_head: bool = True, soft_targets: Optional[Sequence[np.ndarray]] = None,
               box_scale: float = 1.0):
    """Mean loss parts over a batch at fixed assignments, with head gradients of the mean total."""
    n = len(out)
    grads = NetworkOutput(np.zeros_like(out.alpha), np.zeros_like(out.o1), np.zeros_like(out.o2))
    parts = np.zeros(3)
    for b in range(n):
        soft = None if soft_targets is None else soft_targets[b]
        lp, g = total_loss(boxes[b], mask[b], out[b], mappings[b], use_permutation_head, soft, box_scale)
        parts += (lp.f1, lp.f2, lp.f3)
        grads.alpha[b], grads.o1[b], grads.o2[b] = g.alpha, g.o1, g.o2
    n = max(n, 1)
    return parts / n, NetworkOutput(grads.alpha / n, grads.o1 / n, grads.o2 / n)


def train_step(batch: Batch, model: PermSetNet, optimizer: Adam, histogram: PermutationHistogram,
               config: TrainConfig) -> StepResult:
    out = model.forward(batch.x)
    histogram.tick()
    mappings, ranks, soft = [], [], []
    for b in range(len(batch.ids)):
        mapping, _ = assign_permutation(batch.boxes[b], batch.mask[b], out[b], config.assignment_mode,
                                        config.box_scale)
        rank = perm_rank(mapping)
        histogram.record(batch.ids[b], rank)
        mappings.append(mapping)
        ranks.append(rank)
        if config.f2_target == "soft":
            soft.append(histogram.normalized(batch.ids[b], out.o2.shape[1]))
    parts, grads = batch_loss(out, batch.boxes, batch.mask, mappings, config.use_permutation_head,
                              soft if config.f2_target == "soft" else None, config.box_scale)
    model.backward(grads.alpha, grads.o1, grads.o2)
    optimizer.step(model.parameters(), model.gradients())
    return StepResult(float(parts.sum()), float(parts[0]), float(parts[1]), float(parts[2]), ranks)


def evaluate_loss(model: PermSetNet, x: np.ndarray, boxes: np.ndarray, mask: np.ndarray,
                  config: TrainConfig, chunk: int = 64) -> float:
    """Mean total loss under the configured assignment, without updating anything."""
    total = 0.0
    for start in range(0, len(x), chunk):
        out = model.forward(x[start:start + chunk])
        for b in range(len(out)):
            i = start + b
            mapping, _ = assign_permutation(boxes[i], mask[i], out[b], config.assignment_mode, config.box_scale)
            lp, _ = total_loss(boxes[i], mask[i], out[b], mapping, config.use_permutation_head,
                               box_scale=config.box_scale)
            total += lp.total
    return total / max(len(x), 1)


def padded_targets(sets: Sequence[GroundTruthSet], M: int, layout: str = "annotation"):
    boxes = np.zeros((len(sets), M, 4))
    mask = np.zeros((len(sets), M), dtype=bool)
    for i, gt in enumerate(sets):
        boxes[i], mask[i] = pad_ground_truth(gt, M, layout)
    return boxes, mask


def flip_batch(x: np.ndarray, boxes: np.ndarray, mask: np.ndarray, rng: np.random.Generator):
    """Apply a random symmetry of the square (flips, plus a transpose when H == W) per sample."""
    x = x.copy()
    boxes = boxes.copy()
    hflip = rng.random(len(x)) < 0.5
    vflip = rng.random(len(x)) < 0.5
    transpose = (rng.random(len(x)) < 0.5) & (x.shape[2] == x.shape[3])
    x[hflip] = x[hflip][..., ::-1]
    x[vflip] = x[vflip][..., ::-1, :]
    x[transpose] = x[transpose].swapaxes(2, 3)
    boxes[hflip, :, 0] = 1.0 - boxes[hflip, :, 0] - boxes[hflip, :, 2]
    boxes[vflip, :, 1] = 1.0 - boxes[vflip, :, 1] - boxes[vflip, :, 3]
    boxes[transpose] = boxes[transpose][..., [1, 0, 3, 2]]
    boxes[~mask] = 0.0
    return x, boxes


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sample indices for a given iteration; reproducible from (seed, iteration) alone."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, pos = divmod(iteration, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return order[pos * batch_size:(pos + 1) * batch_size]


def fit(model: PermSetNet, x: np.ndarray, sets: Sequence[GroundTruthSet], config: TrainConfig,
        optimizer: Optional[Adam] = None, histogram: Optional[PermutationHistogram] = None,
        log: Optional[IO[str]] = None, start_iteration: int = 0) -> List[StepResult]:
    """Run ``config.iterations`` training steps starting at ``start_iteration``.

    Each step writes one JSON line to ``log`` when given.
    """
    if model.M != config.M:
        raise ValueError(f"model has M={model.M}, config has M={config.M}")
    optimizer = optimizer if optimizer is not None else config.make_optimizer()
    histogram = histogram if histogram is not None else PermutationHistogram()
    boxes, mask = padded_targets(sets, config.M, config.target_layout)
    history = []
    for it in range(start_iteration, start_iteration + config.iterations):
        optimizer.lr = config.lr_at(it)
        idx = batch_indices(len(x), config.batch_size, config.seed, it)
        bx, bb = x[idx], boxes[idx]
        if config.augment:
            bx, bb = flip_batch(bx, bb, mask[idx], np.random.default_rng([config.seed, it, 1]))
        res = train_step(Batch(bx, bb, mask[idx], [int(i) for i in idx]), model, optimizer, histogram, config)
        history.append(res)
        if log is not None:
            rec = {"iteration": it + 1, "loss": res.loss, "f1": res.f1, "f2": res.f2, "f3": res.f3, "ranks": res.ranks}
            log.write(json.dumps(rec) + "\n")
    return history


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def predict(model: PermSetNet, x: np.ndarray, chunk: int = 64) -> NetworkOutput:
    outs = [model.forward(x[s:s + chunk]) for s in range(0, len(x), chunk)]
    return NetworkOutput(*(np.concatenate(parts) for parts in zip(*((o.alpha, o.o1, o.o2) for o in outs))))
