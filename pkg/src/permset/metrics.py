"""Detection and set-prediction metrics.

Boxes are ``(x, y, w, h)`` rows. Per-image inputs are lists indexed by image:
detections as ``(boxes, scores)`` pairs, ground truth as box arrays.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .assignment import hungarian

OCCLUSION_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
MR_FPPI = np.logspace(-2.0, 0.0, 9)
MR_FLOOR = 1e-10


def iou(a, b) -> float:
    ax, ay, aw, ah = map(float, a[:4])
    bx, by, bw, bh = map(float, b[:4])
    # the overlap never exceeds either side; clamping stops (x + w) - x rounding past w
    iw = max(0.0, min(min(ax + aw, bx + bw) - max(ax, bx), aw, bw))
    ih = max(0.0, min(min(ay + ah, by + bh) - max(ay, by), ah, bh))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 0] + a[:, None, 2], b[None, :, 0] + b[None, :, 2])
    y2 = np.minimum(a[:, None, 1] + a[:, None, 3], b[None, :, 1] + b[None, :, 3])
    iw = np.clip(np.minimum(x2 - x1, np.minimum(a[:, None, 2], b[None, :, 2])), 0, None)
    ih = np.clip(np.minimum(y2 - y1, np.minimum(a[:, None, 3], b[None, :, 3])), 0, None)
    inter = iw * ih
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class MatchResult:
    tp: np.ndarray  # per detection, in the given order
    gt_matched: np.ndarray  # per ground-truth box
    det_to_gt: np.ndarray  # matched gt index per detection, -1 if none

    @property
    def n_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def n_fp(self) -> int:
        return int((~self.tp).sum())

    @property
    def n_fn(self) -> int:
        return int((~self.gt_matched).sum())


def match_detections(dets, gts, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching; ``dets`` must already be sorted by descending score.

    Each detection takes the unmatched ground truth of highest IoU if that IoU
    reaches the threshold.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(dets, gts)
    gt_matched = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    det_to_gt = np.full(len(dets), -1)
    for d in range(len(dets)):
        if not len(gts):
            break
        cand = np.where(gt_matched, -1.0, ious[d])
        g = int(np.argmax(cand))
        if cand[g] >= iou_thresh:
            gt_matched[g] = True
            tp[d] = True
            det_to_gt[d] = g
    return MatchResult(tp, gt_matched, det_to_gt)


def _sorted(boxes, scores):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    return boxes[order], scores[order]


@dataclass
class CurvePoint:
    tau: float
    precision: float
    recall: float
    fppi: float


def pr_curve(dets: Sequence[Tuple[np.ndarray, np.ndarray]], gts: Sequence[np.ndarray],
             iou_thresh: float = 0.5) -> List[CurvePoint]:
    """One point per distinct score, ordered by descending threshold.

    A point at threshold tau counts every detection with score >= tau.
    """
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts)
    n_img = max(len(gts), 1)
    all_scores, all_tp = [], []
    for (boxes, scores), g in zip(dets, gts):
        boxes, scores = _sorted(boxes, scores)
        # greedy matching in score order: thresholding keeps a prefix and its decisions
        res = match_detections(boxes, g, iou_thresh)
        all_scores.append(scores)
        all_tp.append(res.tp)
    if not all_scores or not sum(len(s) for s in all_scores):
        return []
    scores = np.concatenate(all_scores)
    tp = np.concatenate(all_tp)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    curve = []
    for e in ends:
        t, f = ctp[e], cfp[e]
        curve.append(CurvePoint(float(scores[e]), float(t / (t + f)), float(t / n_gt) if n_gt else 0.0, float(f / n_img)))
    return curve


def auc_trapezoid(curve: Sequence[CurvePoint]) -> float:
    """Area under precision over recall, starting from (0, first precision)."""
    if not curve:
        return 0.0
    area = 0.0
    r0, p0 = 0.0, curve[0].precision
    for pt in curve:
        area += (pt.recall - r0) * (pt.precision + p0) / 2.0
        r0, p0 = pt.recall, pt.precision
    return area


def average_precision(dets, gts, iou_thresh: float = 0.5) -> float:
    return auc_trapezoid(pr_curve(dets, gts, iou_thresh))


def f1_score(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def best_f1(curve: Sequence[CurvePoint]) -> Tuple[float, Optional[float]]:
    """Highest F1 along the curve and the threshold reaching it."""
    best, tau = 0.0, None
    for pt in curve:
        f = f1_score(pt.precision, pt.recall)
        if f > best:
            best, tau = f, pt.tau
    return best, tau


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        d = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / d if d else 1.0


def point_counts(dets, gts, iou_thresh: float = 0.5) -> Counts:
    c = Counts()
    for (boxes, scores), g in zip(dets, gts):
        boxes, _ = _sorted(boxes, scores)
        res = match_detections(boxes, g, iou_thresh)
        c.tp += res.n_tp
        c.fp += res.n_fp
        c.fn += res.n_fn
    return c


def point_f1(dets, gts, iou_thresh: float = 0.5) -> float:
    """F1 of a single operating point (every given detection is kept)."""
    return point_counts(dets, gts, iou_thresh).f1


def log_average_miss_rate(curve: Sequence[CurvePoint]) -> float:
    """Geometric mean of miss rate at 9 log-spaced FPPI values in [0.01, 1].

    At each sample the curve point with the largest FPPI not exceeding it is
    used; with none, the miss rate is 1.
    """
    fppi = np.array([p.fppi for p in curve])
    miss = np.array([1.0 - p.recall for p in curve])
    samples = []
    for ref in MR_FPPI:
        idx = np.flatnonzero(fppi <= ref)
        samples.append(miss[idx[-1]] if len(idx) else 1.0)
    samples = np.maximum(np.array(samples), MR_FLOOR)
    return float(np.exp(np.mean(np.log(samples))))


def occlusion_level(gts: np.ndarray) -> np.ndarray:
    """Max IoU of each ground-truth box with any other box of the same image."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if len(gts) < 2:
        return np.zeros(len(gts))
    m = iou_matrix(gts, gts)
    np.fill_diagonal(m, 0.0)
    return m.max(axis=1)


def occlusion_bin(level: float) -> int:
    return int(np.searchsorted(OCCLUSION_EDGES, level, side="right")) - 1


def occlusion_bin_label(b: int) -> str:
    lo = OCCLUSION_EDGES[b]
    return f"{lo:.1f}+" if b == len(OCCLUSION_EDGES) - 1 else f"{lo:.1f}-{OCCLUSION_EDGES[b + 1]:.1f}"


def occlusion_binned_f1(dets, gts, iou_thresh: float = 0.5) -> Dict[str, float]:
    """F1 per occlusion bin of the ground truth.

    True positives and misses count in the bin of their ground-truth box. A
    false positive counts in the bin of the ground-truth box it overlaps most,
    or the lowest bin when it overlaps none. Only populated bins are returned.
    """
    counts: Dict[int, Counts] = defaultdict(Counts)
    populated = set()
    for (boxes, scores), g in zip(dets, gts):
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        bins = [occlusion_bin(v) for v in occlusion_level(g)]
        populated.update(bins)
        boxes, _ = _sorted(boxes, scores)
        res = match_detections(boxes, g, iou_thresh)
        ious = iou_matrix(boxes, g)
        for d in range(len(boxes)):
            if res.tp[d]:
                counts[bins[res.det_to_gt[d]]].tp += 1
            else:
                k = int(np.argmax(ious[d])) if len(g) else -1
                counts[bins[k] if k >= 0 and ious[d, k] > 0 else 0].fp += 1
        for k in np.flatnonzero(~res.gt_matched):
            counts[bins[k]].fn += 1
    return {occlusion_bin_label(b): counts[b].f1 for b in sorted(populated)}


def captcha_correct(pred_boxes, solution_boxes, iou_thresh: float = 0.5) -> bool:
    """Correct iff sizes agree and a one-to-one pairing has every IoU above the threshold."""
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    s = np.asarray(solution_boxes, dtype=np.float64).reshape(-1, 4)
    if len(p) != len(s):
        return False
    if not len(s):
        return True
    miss = (iou_matrix(s, p) <= iou_thresh).astype(np.float64)
    _, cost = hungarian(miss)
    return cost == 0.0


def captcha_accuracy(predictions: Sequence, solutions: Sequence, iou_thresh: float = 0.5) -> float:
    if not len(solutions):
        return 0.0
    ok = sum(captcha_correct(p, s, iou_thresh) for p, s in zip(predictions, solutions))
    return ok / len(solutions)


def identification_accuracy(pred_boxes: Sequence[np.ndarray], pred_slots: Sequence[Sequence[int]],
                            gts: Sequence[np.ndarray], identities: Sequence[Sequence[int]],
                            iou_thresh: float = 0.5) -> float:
    """Share of true-positive detections whose slot is the majority slot of their identity.

    Detections are matched to ground truth greedily in the given order (pass
    them sorted by score). Each ground-truth identity is first mapped to the
    slot it is most often detected in across all images (ties to the lower
    slot); undetected ground truth does not count.
    """
    pairs = []
    for boxes, slots, g, ids in zip(pred_boxes, pred_slots, gts, identities):
        res = match_detections(boxes, g, iou_thresh)
        for d in np.flatnonzero(res.tp):
            pairs.append((int(ids[res.det_to_gt[d]]), int(slots[d])))
    if not pairs:
        return 0.0
    votes: Dict[int, Counter] = defaultdict(Counter)
    for ident, slot in pairs:
        votes[ident][slot] += 1
    majority = {i: min(c.items(), key=lambda kv: (-kv[1], kv[0]))[0] for i, c in votes.items()}
    return sum(majority[i] == s for i, s in pairs) / len(pairs)


def write_curve_csv(path, curve: Sequence[CurvePoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["tau", "precision", "recall", "fppi"])
        for pt in sorted(curve, key=lambda p: -p.tau):
            w.writerow([repr(pt.tau), repr(pt.precision), repr(pt.recall), repr(pt.fppi)])


def read_curve_csv(path) -> List[CurvePoint]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [CurvePoint(float(r["tau"]), float(r["precision"]), float(r["recall"]), float(r["fppi"])) for r in rows]
