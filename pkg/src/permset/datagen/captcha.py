"""De-summing CAPTCHA instances.

A query digit and a scene of 2..6 digits are drawn so that exactly one subset
of the scene digits sums to the query (or, for an empty answer, none does).
The glyph for zero stands for the value 10.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

MAX_RETRIES = 1000
GLYPH_SIZE = 28

# 5x7 bitmaps, rows top to bottom
_FONT = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11110", "00001", "00001", "01110", "00001", "00001", "11110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


class CaptchaError(RuntimeError):
    pass


def digit_value(label: int) -> int:
    return 10 if label == 0 else int(label)


def value_label(value: int) -> int:
    return value % 10


def procedural_glyph(label: int, rng: np.random.Generator) -> np.ndarray:
    """A 28x28 white-on-black digit with random stroke width, shear and blur."""
    bitmap = np.array([[c == "1" for c in row] for row in _FONT[label]], dtype=np.float64)
    big = np.kron(bitmap, np.ones((3, 3)))  # 21 x 15
    canvas = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    canvas[3:24, 6:21] = big
    shear = rng.uniform(-0.15, 0.15)
    matrix = np.array([[1.0, 0.0], [shear, 1.0]])
    centre = np.array([GLYPH_SIZE / 2, GLYPH_SIZE / 2])
    canvas = ndimage.affine_transform(canvas, matrix, offset=centre - matrix @ centre, order=1)
    if rng.random() < 0.5:
        canvas = ndimage.grey_dilation(canvas, size=(2, 2))
    canvas = ndimage.gaussian_filter(canvas, rng.uniform(0.5, 1.0))
    canvas = canvas / max(canvas.max(), 1e-9)
    return np.clip(canvas * 255, 0, 255).astype(np.uint8)


class DigitPool:
    """Glyph images grouped by label 0..9."""

    def __init__(self, images: np.ndarray, labels: np.ndarray) -> None:
        labels = np.asarray(labels).astype(int)
        self.by_label: Dict[int, np.ndarray] = {d: images[labels == d] for d in range(10)}
        missing = [d for d, imgs in self.by_label.items() if not len(imgs)]
        if missing:
            raise ValueError(f"digit pool lacks labels {missing}")

    @classmethod
    def procedural(cls, per_digit: int = 50, seed: int = 0) -> "DigitPool":
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(10), per_digit)
        images = np.stack([procedural_glyph(int(d), rng) for d in labels])
        return cls(images, labels)

    def sample(self, label: int, rng: np.random.Generator) -> np.ndarray:
        imgs = self.by_label[label]
        return imgs[rng.integers(len(imgs))]


@dataclass
class CaptchaConfig:
    width: int = 300
    height: int = 75
    min_digits: int = 2
    max_digits: int = 6
    rotation_deg: float = 30.0
    scale_range: Tuple[float, float] = (0.6, 1.4)
    noise_sigma: float = 20.0
    allow_empty: bool = True
    empty_prob: float = 0.1  # share of instances drawn with an empty answer


@dataclass
class CaptchaInstance:
    query: np.ndarray  # (28, 28) uint8
    scene: np.ndarray  # (height, width) uint8
    query_value: int
    values: List[int]
    boxes: np.ndarray  # (n, 4) normalized x, y, w, h
    solution: Tuple[int, ...]  # indices into values / boxes

    @property
    def solution_boxes(self) -> np.ndarray:
        return self.boxes[list(self.solution)].reshape(-1, 4)


def subset_sum_solutions(values: Sequence[int], target: int) -> List[Tuple[int, ...]]:
    """Every non-empty index subset whose values sum to ``target`` (exhaustive)."""
    n = len(values)
    out = []
    for k in range(1, n + 1):
        for combo in itertools.combinations(range(n), k):
            if sum(values[i] for i in combo) == target:
                out.append(combo)
    return out


def unique_solution(values: Sequence[int], target: int, allow_empty: bool = True) -> Optional[Tuple[int, ...]]:
    """The single valid answer, ``()`` for an empty answer, or None if the puzzle is invalid."""
    sols = subset_sum_solutions(values, target)
    if len(sols) == 1:
        return sols[0]
    if not sols and allow_empty:
        return ()
    return None


def _glyph_patch(glyph: np.ndarray, config: CaptchaConfig, rng: np.random.Generator) -> np.ndarray:
    g = glyph.astype(np.float64)
    g = ndimage.zoom(g, rng.uniform(*config.scale_range), order=1)
    g = ndimage.rotate(g, rng.uniform(-config.rotation_deg, config.rotation_deg), reshape=True, order=1)
    on = g > 40
    if not on.any():
        return np.clip(g, 0, 255)
    rows = np.flatnonzero(on.any(axis=1))
    cols = np.flatnonzero(on.any(axis=0))
    patch = g[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return np.clip(np.where(patch > 40, patch, 0.0), 0, 255)


def _layout(patches: List[np.ndarray], config: CaptchaConfig, rng: np.random.Generator):
    taken: List[Tuple[int, int, int, int]] = []
    for p in patches:
        h, w = p.shape
        if h > config.height or w > config.width:
            return None
        for _ in range(MAX_RETRIES):
            y = int(rng.integers(0, config.height - h + 1))
            x = int(rng.integers(0, config.width - w + 1))
            if all(x + w + 1 <= tx or tx + tw + 1 <= x or y + h + 1 <= ty or ty + th + 1 <= y for tx, ty, tw, th in taken):
                taken.append((x, y, w, h))
                break
        else:
            return None
    return taken


def _noisy(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(np.rint(img + rng.normal(0.0, sigma, size=img.shape)), 0, 255).astype(np.uint8)


def _pick_puzzle(config: CaptchaConfig, rng: np.random.Generator):
    n = int(rng.integers(config.min_digits, config.max_digits + 1))
    labels = [int(d) for d in rng.integers(0, 10, size=n)]
    values = [digit_value(d) for d in labels]
    want_empty = config.allow_empty and rng.random() < config.empty_prob
    counts = {q: len(subset_sum_solutions(values, q)) for q in range(1, 11)}
    choices = [q for q, c in counts.items() if c == (0 if want_empty else 1)]
    if not choices:
        return None
    q = int(rng.choice(choices))
    sol = unique_solution(values, q, config.allow_empty)
    return labels, values, q, sol


def gen_captcha(pool: DigitPool, rng: np.random.Generator, config: CaptchaConfig = CaptchaConfig()) -> CaptchaInstance:
    for _ in range(MAX_RETRIES):
        picked = _pick_puzzle(config, rng)
        if picked is None:
            continue
        labels, values, q, sol = picked
        if sol is None:
            continue
        patches = [_glyph_patch(pool.sample(d, rng), config, rng) for d in labels]
        layout = _layout(patches, config, rng)
        if layout is None:
            continue
        scene = np.zeros((config.height, config.width))
        boxes = []
        for p, (x, y, w, h) in zip(patches, layout):
            scene[y:y + h, x:x + w] = np.maximum(scene[y:y + h, x:x + w], p)
            boxes.append([x / config.width, y / config.height, w / config.width, h / config.height])
        query = pool.sample(value_label(q), rng).astype(np.float64)
        return CaptchaInstance(
            query=_noisy(query, config.noise_sigma, rng),
            scene=_noisy(scene, config.noise_sigma, rng),
            query_value=q,
            values=values,
            boxes=np.array(boxes),
            solution=tuple(sol),
        )
    raise CaptchaError(f"no valid puzzle after {MAX_RETRIES} attempts")
