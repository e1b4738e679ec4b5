"""On-disk datasets: PNM images plus one annotation line per sample.

``annotations.tsv`` line format (tab separated)::

    id  image  x,y,w,h,identity;x,y,w,h,identity;...  [query_image  solution_indices]

Boxes are normalized floats written with ``repr`` so they read back exactly.
For CAPTCHA samples the box list holds every scene digit (identity = digit
value) and ``solution_indices`` is a comma-separated list into it, possibly
empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.transform import resize

from ..elements import GroundTruthSet
from .captcha import CaptchaConfig, DigitPool, gen_captcha
from .pnm import read_pnm, write_pnm
from .shapes import ShapeSceneConfig, gen_shape_scene

ANNOTATIONS = "annotations.tsv"
Box = Tuple[float, float, float, float]


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleAnnotation:
    id: str
    image: str
    boxes: Tuple[Box, ...] = ()
    identities: Tuple[int, ...] = ()
    query_image: Optional[str] = None
    solution: Optional[Tuple[int, ...]] = None

    @property
    def is_captcha(self) -> bool:
        return self.query_image is not None

    def target_boxes(self) -> np.ndarray:
        """Boxes the network should output: all boxes, or the solution subset for CAPTCHA."""
        boxes = np.array(self.boxes, dtype=np.float64).reshape(-1, 4)
        if self.is_captcha:
            return boxes[list(self.solution or ())].reshape(-1, 4)
        return boxes

    def target_set(self) -> GroundTruthSet:
        ids = None if self.is_captcha else list(self.identities)
        return GroundTruthSet.from_boxes(self.target_boxes(), ids)


@dataclass
class Sample:
    annotation: SampleAnnotation
    image: np.ndarray
    query: Optional[np.ndarray] = None


def format_line(a: SampleAnnotation) -> str:
    boxes = ";".join(",".join([*(repr(float(v)) for v in b), str(int(i))]) for b, i in zip(a.boxes, a.identities))
    fields = [a.id, a.image, boxes]
    if a.query_image is not None:
        fields += [a.query_image, ",".join(str(i) for i in (a.solution or ()))]
    return "\t".join(fields)


def parse_line(line: str, lineno: int = 0) -> SampleAnnotation:
    fields = line.rstrip("\n").split("\t")
    if len(fields) not in (3, 5):
        raise DatasetError(f"line {lineno}: expected 3 or 5 tab-separated fields, got {len(fields)}")
    try:
        boxes, ids = [], []
        for item in filter(None, fields[2].split(";")):
            parts = item.split(",")
            if len(parts) != 5:
                raise ValueError(f"box entry {item!r} needs 5 values")
            boxes.append(tuple(float(v) for v in parts[:4]))
            ids.append(int(parts[4]))
        query, solution = None, None
        if len(fields) == 5:
            query = fields[3]
            solution = tuple(int(v) for v in filter(None, fields[4].split(",")))
            if any(not 0 <= i < len(boxes) for i in solution):
                raise ValueError("solution index out of range")
    except ValueError as exc:
        raise DatasetError(f"line {lineno}: {exc}") from None
    return SampleAnnotation(fields[0], fields[1], tuple(boxes), tuple(ids), query, solution)


def write_dataset(samples: Iterable[Sample], directory: Union[str, Path], manifest: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        write_pnm(d / s.annotation.image, s.image)
        if s.annotation.query_image is not None:
            write_pnm(d / s.annotation.query_image, s.query)
        lines.append(format_line(s.annotation) + "\n")
    (d / ANNOTATIONS).write_text("".join(lines))
    if manifest is not None:
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_dataset(directory: Union[str, Path]) -> List[SampleAnnotation]:
    path = Path(directory) / ANNOTATIONS
    if not path.exists():
        raise DatasetError(f"{path} not found")
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                out.append(parse_line(line, lineno))
    return out


def sample_seeds(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_shapes(n: int, config: ShapeSceneConfig, seed: int) -> List[Sample]:
    samples = []
    for i, rng in enumerate(sample_seeds(seed, n)):
        image, boxes, colors = gen_shape_scene(config, rng)
        ann = SampleAnnotation(f"{i:06d}", f"{i:06d}.ppm", tuple(tuple(map(float, b)) for b in boxes), tuple(colors))
        samples.append(Sample(ann, image))
    return samples


def generate_captchas(n: int, pool: DigitPool, config: CaptchaConfig, seed: int) -> List[Sample]:
    samples = []
    for i, rng in enumerate(sample_seeds(seed, n)):
        inst = gen_captcha(pool, rng, config)
        ann = SampleAnnotation(
            f"{i:06d}", f"{i:06d}.pgm",
            tuple(tuple(map(float, b)) for b in inst.boxes), tuple(inst.values),
            f"{i:06d}_query.pgm", inst.solution,
        )
        samples.append(Sample(ann, inst.scene, inst.query))
    return samples


def captcha_input(scene: np.ndarray, query: np.ndarray, size: Tuple[int, int] = (72, 288)) -> np.ndarray:
    """Two-channel network input: the resized scene and the query stretched to the same size."""
    s = resize(scene.astype(np.float64) / 255.0, size, order=1, anti_aliasing=True)
    q = resize(query.astype(np.float64) / 255.0, size, order=1, anti_aliasing=False)
    return np.stack([s, q]) - 0.5


def image_input(image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float64) / 255.0 - 0.5
    return img[None] if img.ndim == 2 else img.transpose(2, 0, 1)


def load_arrays(directory: Union[str, Path], annotations: Optional[Sequence[SampleAnnotation]] = None,
                captcha_size: Tuple[int, int] = (72, 288)):
    """Network inputs ``(N, C, H, W)`` and target sets for a dataset directory."""
    d = Path(directory)
    annotations = read_dataset(d) if annotations is None else annotations
    xs = []
    for a in annotations:
        img = read_pnm(d / a.image)
        if a.is_captcha:
            xs.append(captcha_input(img, read_pnm(d / a.query_image), captcha_size))
        else:
            xs.append(image_input(img))
    x = np.stack(xs) if xs else np.zeros((0, 3, 1, 1))
    return x, [a.target_set() for a in annotations]
