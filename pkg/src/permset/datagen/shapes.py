"""Synthetic scenes of colored, deformed blobs on a textured background.

Each blob is a circle drawn as four cubic Bezier segments whose control points
are jittered, giving a deformed ellipsoid. Boxes are amodal: they bound the
whole blob even where a later blob covers it.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from skimage.draw import polygon as fill_polygon

from ..metrics import iou_matrix

COLOR_NAMES = ("red", "green", "yellow", "blue")
BASE_COLORS = np.array([
    [215, 40, 40],
    [40, 175, 60],
    [230, 205, 40],
    [40, 70, 215],
], dtype=np.float64)
REFERENCE_SIZE = 200.0
KAPPA = 0.5522847498  # Bezier handle length for a quarter circle
MAX_PLACEMENT_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    pass


@dataclass
class ShapeSceneConfig:
    size: int = 64
    min_count: int = 0
    max_count: int = 4
    radius_px: Tuple[float, float] = (25.0, 50.0)  # at the 200 px reference size
    max_iou: float = 0.85
    control_jitter: float = 0.2  # fraction of the radius
    min_visible: float = 0.3  # fraction of each blob left uncovered by later ones
    noise_sigma: float = 8.0
    distinct_colors: bool = True
    background: str = "procedural"  # or "directory"
    background_dir: Optional[str] = None

    def __post_init__(self):
        if not 0.0 < self.max_iou <= 1.0:
            raise ValueError("max_iou must lie in (0, 1]")
        if not 0 <= self.min_count <= self.max_count:
            raise ValueError("need 0 <= min_count <= max_count")
        if self.distinct_colors and self.max_count > len(COLOR_NAMES):
            raise ValueError(f"distinct colors allow at most {len(COLOR_NAMES)} objects")
        if self.background not in ("procedural", "directory"):
            raise ValueError("background must be 'procedural' or 'directory'")
        if self.background == "directory" and not self.background_dir:
            raise ValueError("background 'directory' needs background_dir")

    @property
    def radius_range(self) -> Tuple[float, float]:
        s = self.size / REFERENCE_SIZE
        return self.radius_px[0] * s, self.radius_px[1] * s


def bezier_blob(center, radius: float, jitter: float, rng: np.random.Generator, samples: int = 24) -> np.ndarray:
    """Outline points ``(N, 2)`` as (x, y) of a jittered four-segment Bezier circle."""
    cx, cy = center
    k = KAPPA * radius
    # anchors at 0, 90, 180, 270 degrees with tangent handles
    ctrl = []
    for a in range(4):
        t = a * np.pi / 2
        p = np.array([np.cos(t), np.sin(t)])
        d = np.array([-np.sin(t), np.cos(t)])
        ctrl.append((p * radius, d * k))
    pts = []
    for a in range(4):
        p0, d0 = ctrl[a]
        p3, d3 = ctrl[(a + 1) % 4]
        cps = np.array([p0, p0 + d0, p3 - d3, p3])
        pts.append(cps)
    segs = np.array(pts)  # (4, 4, 2), shared anchors jittered once below
    offsets = rng.uniform(0, jitter * radius, size=(4, 3))
    angles = rng.uniform(0, 2 * np.pi, size=(4, 3))
    delta = np.stack([offsets * np.cos(angles), offsets * np.sin(angles)], axis=-1)  # per segment: p0, c1, c2
    segs[:, :3] += delta
    segs[:, 3] = np.roll(segs[:, 0], -1, axis=0)
    t = np.linspace(0.0, 1.0, samples, endpoint=False)[:, None]
    basis = np.stack([(1 - t) ** 3, 3 * (1 - t) ** 2 * t, 3 * (1 - t) * t ** 2, t ** 3], axis=0)  # (4, S, 1)
    curve = np.einsum("kst,gkd->gsd", basis, segs).reshape(-1, 2)
    return curve + np.array([cx, cy])


def blob_mask(outline: np.ndarray, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    rr, cc = fill_polygon(outline[:, 1], outline[:, 0], shape=mask.shape)
    mask[rr, cc] = True
    return mask


def mask_box(mask: np.ndarray) -> np.ndarray:
    """Tight normalized (x, y, w, h) of a non-empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    h, w = mask.shape
    return np.array([cols[0] / w, rows[0] / h, (cols[-1] + 1 - cols[0]) / w, (rows[-1] + 1 - rows[0]) / h])


@lru_cache(maxsize=8)
def _upsample_matrix(n: int, size: int) -> np.ndarray:
    # cubic spline zoom is linear and separable: zooming the unit vectors gives its matrix
    return ndimage.zoom(np.eye(n), (size / n, 1), order=3, mode="nearest")


def procedural_background(size: int, rng: np.random.Generator) -> np.ndarray:
    grey = rng.uniform(60, 190, size=(4, 4, 1))
    coarse = grey + rng.uniform(-25, 25, size=(4, 4, 3))
    a = _upsample_matrix(4, size)
    fine = np.tensordot(np.tensordot(a, coarse, axes=(1, 0)), a, axes=(1, 1)).transpose(0, 2, 1)
    return np.clip(fine, 0, 255)


def directory_background(size: int, directory: str, rng: np.random.Generator) -> np.ndarray:
    from PIL import Image

    files = sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".ppm", ".bmp"))
    if not files:
        raise FileNotFoundError(f"no background images in {directory}")
    img = Image.open(files[rng.integers(len(files))]).convert("RGB")
    w, h = img.size
    side = int(rng.integers(min(w, h) // 2, min(w, h) + 1))
    x0 = int(rng.integers(0, w - side + 1))
    y0 = int(rng.integers(0, h - side + 1))
    img = img.crop((x0, y0, x0 + side, y0 + side))
    return np.asarray(img.resize((size, size)), dtype=np.float64)


def _tone(color: int, rng: np.random.Generator) -> np.ndarray:
    return np.clip(BASE_COLORS[color] * rng.uniform(0.75, 1.15) + rng.uniform(-20, 20, size=3), 0, 255)


def _place(n: int, config: ShapeSceneConfig, rng: np.random.Generator):
    lo, hi = config.radius_range
    masks: List[np.ndarray] = []
    boxes: List[np.ndarray] = []
    attempts = 0
    while len(masks) < n:
        attempts += 1
        if attempts > MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(f"could not place {n} objects")
        r = rng.uniform(lo, hi)
        margin = r * (1.0 + config.control_jitter)
        c = rng.uniform(margin, config.size - margin, size=2)
        mask = blob_mask(bezier_blob(c, r, config.control_jitter, rng), config.size)
        if not mask.any():
            continue
        box = mask_box(mask)
        if boxes and iou_matrix(box, np.array(boxes)).max() > config.max_iou:
            continue
        # the new blob is drawn on top; all earlier blobs must stay visible enough
        cover = mask.copy()
        ok = True
        for i in range(len(masks) - 1, -1, -1):
            if (masks[i] & ~cover).sum() < config.min_visible * masks[i].sum():
                ok = False
                break
            cover |= masks[i]
        if not ok:
            continue
        masks.append(mask)
        boxes.append(box)
    return masks, boxes


def gen_shape_scene(config: ShapeSceneConfig, rng: np.random.Generator):
    """Render one scene; returns ``(image uint8 (H, W, 3), boxes (n, 4), color identities)``."""
    while True:
        n = int(rng.integers(config.min_count, config.max_count + 1))
        try:
            masks, boxes = _place(n, config, rng)
            break
        except PlacementError:
            continue
    if config.distinct_colors:
        colors = [int(c) for c in rng.permutation(len(COLOR_NAMES))[:n]]
    else:
        colors = [int(c) for c in rng.integers(len(COLOR_NAMES), size=n)]
    if config.background == "directory":
        img = directory_background(config.size, config.background_dir, rng)
    else:
        img = procedural_background(config.size, rng)
    for mask, color in zip(masks, colors):
        img[mask] = _tone(color, rng)
    img = img + rng.normal(0.0, config.noise_sigma, size=img.shape)
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return image, np.array(boxes).reshape(-1, 4), colors
