"""Command-line entry point: ``permset gen|train|eval|infer``.

Settings come from an optional flat ``key = value`` file (``--config``) and
are overridden by command-line flags. Every command writes its resolved
settings to ``<out>/<command>.config`` before doing any work.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .datagen import (CaptchaConfig, DatasetError, DigitPool, IDXError, ShapeSceneConfig, generate_captchas,
                      generate_shapes, load_arrays, load_idx, read_dataset, read_pnm, write_dataset)
from .datagen.dataset import captcha_input, image_input
from .datagen.pnm import PNMError
from .inference import InferenceConfig, infer
from .metrics import (average_precision, best_f1, captcha_accuracy, identification_accuracy,
                      log_average_miss_rate, occlusion_binned_f1, point_counts, pr_curve, write_curve_csv)
from .model import PermSetNet
from .nn import ShapeError
from .training import PermutationHistogram, TrainConfig, fit, predict

DATA_ROOT_ENV = "PERMSET_DATA_ROOT"
CHECKPOINT = "model.ckpt"
TRAIN_LOG = "train_log.jsonl"
HISTOGRAMS = "histograms.json"
DETECTION_U = 0.1
CAPTCHA_U = 2.0


class CLIError(Exception):
    pass


def parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def optional(kind: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        return None if text.strip().lower() in ("", "none") else kind(text)
    parse.__name__ = getattr(kind, "__name__", "value")
    return parse


@dataclass(frozen=True)
class Option:
    key: str
    kind: Callable[[str], Any]
    default: Any
    help: str = ""


SHAPES_OPTIONS = [
    Option("out", str, None, "dataset directory to create"),
    Option("n", int, 2000, "number of scenes"),
    Option("seed", int, 0, "generator seed"),
    Option("size", int, 64, "image side in pixels"),
    Option("min_count", int, 0, "fewest objects per scene"),
    Option("max_count", int, 4, "most objects per scene"),
    Option("radius_min", float, 25.0, "smallest radius in pixels at 200 px image size"),
    Option("radius_max", float, 50.0, "largest radius in pixels at 200 px image size"),
    Option("max_iou", float, 0.85, "largest allowed IoU between two objects"),
    Option("control_jitter", float, 0.2, "control point jitter as a fraction of the radius"),
    Option("min_visible", float, 0.3, "smallest visible fraction of an occluded object"),
    Option("noise_sigma", float, 8.0, "pixel noise standard deviation"),
    Option("distinct_colors", parse_bool, True, "give every object in a scene its own color"),
    Option("background", str, "procedural", "procedural or directory"),
    Option("background_dir", optional(str), None, "image directory for background crops"),
]

CAPTCHA_OPTIONS = [
    Option("out", str, None, "dataset directory to create"),
    Option("n", int, 1000, "number of puzzles"),
    Option("seed", int, 0, "generator seed"),
    Option("width", int, 300, "scene width"),
    Option("height", int, 75, "scene height"),
    Option("min_digits", int, 2, "fewest digits per scene"),
    Option("max_digits", int, 6, "most digits per scene"),
    Option("rotation_deg", float, 30.0, "largest absolute glyph rotation"),
    Option("scale_min", float, 0.6, "smallest glyph scale"),
    Option("scale_max", float, 1.4, "largest glyph scale"),
    Option("noise_sigma", float, 20.0, "pixel noise standard deviation"),
    Option("allow_empty", parse_bool, True, "allow puzzles whose answer is the empty set"),
    Option("empty_prob", float, 0.1, "share of puzzles drawn with an empty answer"),
    Option("mnist_images", optional(str), None, "IDX image file; built-in glyphs when unset"),
    Option("mnist_labels", optional(str), None, "IDX label file"),
    Option("glyphs_per_digit", int, 50, "built-in glyph variants per digit"),
]

TRAIN_OPTIONS = [
    Option("data", str, None, "training dataset directory"),
    Option("out", str, None, "run directory"),
    Option("M", int, 4, "number of output slots"),
    Option("lr", float, 1e-3, "Adam learning rate"),
    Option("beta1", float, 0.9, "Adam first-moment decay"),
    Option("beta2", float, 0.999, "Adam second-moment decay"),
    Option("eps", float, 1e-8, "Adam epsilon"),
    Option("weight_decay", float, 1e-4, "weight decay coefficient"),
    Option("batch_size", int, 32, "samples per step"),
    Option("iterations", int, 1000, "training steps to run"),
    Option("seed", int, 0, "initialization and sampling seed"),
    Option("assignment", str, "hungarian_f1", "hungarian_f1, brute_f1f2 or fixed_order"),
    Option("use_permutation_head", parse_bool, True, "train the permutation head"),
    Option("f2_target", str, "hard", "hard or soft permutation targets"),
    Option("augment", parse_bool, False, "random flips and transposes"),
    Option("target_layout", str, "annotation", "annotation, or identity to pad each target at its identity tag"),
    Option("box_scale", float, 1.0, "factor on box residuals inside the smooth-L1 (e.g. image size for pixels)"),
    Option("lr_drop_at", int, 0, "iteration from which the learning rate is multiplied by lr_drop (0: never)"),
    Option("lr_drop", float, 0.1, "learning-rate factor applied from lr_drop_at on"),
    Option("conv_channels", int, 16, "channels of each conv layer"),
    Option("hidden", int, 256, "width of the hidden affine layer"),
    Option("resume", optional(str), None, "checkpoint to continue from"),
]

EVAL_OPTIONS = [
    Option("data", str, None, "evaluation dataset directory"),
    Option("out", str, None, "report directory"),
    Option("checkpoint", optional(str), None, "trained model"),
    Option("U", optional(float), None, "unit of hyper-volume; 0.1 for detection, 2 for puzzles when unset"),
    Option("iou", float, 0.5, "IoU needed for a true positive"),
    Option("oracle", parse_bool, False, "score the ground truth itself instead of a model"),
]

INFER_OPTIONS = [
    Option("checkpoint", str, None, "trained model"),
    Option("out", str, None, "output directory"),
    Option("query", optional(str), None, "query digit image for puzzle models"),
    Option("mode", str, "map", "map or threshold"),
    Option("tau", float, 0.5, "score threshold in threshold mode"),
    Option("U", float, DETECTION_U, "unit of hyper-volume"),
]

COMMANDS: Dict[str, List[Option]] = {
    "gen shapes": SHAPES_OPTIONS,
    "gen captcha": CAPTCHA_OPTIONS,
    "train": TRAIN_OPTIONS,
    "eval": EVAL_OPTIONS,
    "infer": INFER_OPTIONS,
}


# -- settings --------------------------------------------------------------------------------

def read_config_file(path: str) -> Dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CLIError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def resolve(options: List[Option], file_values: Dict[str, str], flags: Dict[str, Any]) -> Dict[str, Any]:
    known = {o.key: o for o in options}
    unknown = sorted(set(file_values) - set(known))
    if unknown:
        raise CLIError(f"unknown config keys: {', '.join(unknown)}")
    settings = {}
    for o in options:
        if flags.get(o.key) is not None:
            settings[o.key] = flags[o.key]
        elif o.key in file_values:
            try:
                settings[o.key] = o.kind(file_values[o.key])
            except ValueError as exc:
                raise CLIError(f"config key {o.key}: {exc}") from None
        else:
            settings[o.key] = o.default
    missing = [k for k in ("out", "data", "checkpoint") if k in known and settings[k] is None
               and not (k == "checkpoint" and settings.get("oracle"))]
    if missing:
        raise CLIError(f"missing required setting: {', '.join(missing)}")
    return settings


def echo_config(out: Path, name: str, settings: Dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {'none' if v is None else v}" for k, v in settings.items()]
    (out / f"{name}.config").write_text("\n".join(lines) + "\n")


def data_path(path: str) -> Path:
    """Relative dataset paths are taken from $PERMSET_DATA_ROOT when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


# -- commands ---------------------------------------------------------------------------------

def cmd_gen_shapes(s: Dict[str, Any]) -> Path:
    out = data_path(s["out"])
    echo_config(out, "gen", s)
    try:
        cfg = ShapeSceneConfig(size=s["size"], min_count=s["min_count"], max_count=s["max_count"],
                               radius_px=(s["radius_min"], s["radius_max"]), max_iou=s["max_iou"],
                               control_jitter=s["control_jitter"], min_visible=s["min_visible"],
                               noise_sigma=s["noise_sigma"], distinct_colors=s["distinct_colors"],
                               background=s["background"], background_dir=s["background_dir"])
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    samples = generate_shapes(s["n"], cfg, s["seed"])
    write_dataset(samples, out, manifest={"task": "shapes", **s})
    return out


def cmd_gen_captcha(s: Dict[str, Any]) -> Path:
    out = data_path(s["out"])
    echo_config(out, "gen", s)
    if (s["mnist_images"] is None) != (s["mnist_labels"] is None):
        raise CLIError("mnist_images and mnist_labels must be given together")
    if s["mnist_images"]:
        pool = DigitPool(*load_idx(data_path(s["mnist_images"]), data_path(s["mnist_labels"])))
    else:
        pool = DigitPool.procedural(s["glyphs_per_digit"], seed=s["seed"])
    cfg = CaptchaConfig(width=s["width"], height=s["height"], min_digits=s["min_digits"],
                        max_digits=s["max_digits"], rotation_deg=s["rotation_deg"],
                        scale_range=(s["scale_min"], s["scale_max"]), noise_sigma=s["noise_sigma"],
                        allow_empty=s["allow_empty"], empty_prob=s["empty_prob"])
    samples = generate_captchas(s["n"], pool, cfg, s["seed"])
    write_dataset(samples, out, manifest={"task": "captcha", **s})
    return out


def _load_model(path: str):
    tensors = load_tensors(data_path(path))
    model = PermSetNet.from_tensors(tensors)
    return model, tensors


def cmd_train(s: Dict[str, Any]) -> Path:
    out = Path(s["out"])
    echo_config(out, "train", s)
    data = data_path(s["data"])
    x, sets = load_arrays(data)
    if not len(x):
        raise CLIError(f"dataset {data} is empty")
    largest = max(len(g) for g in sets)
    if largest > s["M"]:
        raise CLIError(f"dataset has sets of size {largest} but M = {s['M']}")
    try:
        config = TrainConfig(M=s["M"], lr=s["lr"], beta1=s["beta1"], beta2=s["beta2"], eps=s["eps"],
                             weight_decay=s["weight_decay"], batch_size=s["batch_size"],
                             iterations=s["iterations"], seed=s["seed"], assignment_mode=s["assignment"],
                             use_permutation_head=s["use_permutation_head"], f2_target=s["f2_target"],
                             augment=s["augment"], target_layout=s["target_layout"],
                             box_scale=s["box_scale"], lr_drop_at=s["lr_drop_at"], lr_drop=s["lr_drop"])
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    optimizer = config.make_optimizer()
    histogram = PermutationHistogram()
    start = 0
    if s["resume"]:
        model, tensors = _load_model(s["resume"])
        if model.M != config.M:
            raise CLIError(f"checkpoint has M = {model.M}, config has M = {config.M}")
        if "adam.step" in tensors:
            optimizer.load_state_tensors(tensors)
            start = optimizer.step_count
        hist_path = Path(s["resume"]).parent / HISTOGRAMS
        if hist_path.exists():
            histogram = PermutationHistogram.from_json(json.loads(hist_path.read_text()))
    else:
        model = PermSetNet(M=config.M, in_channels=x.shape[1], height=x.shape[2], width=x.shape[3],
                           conv_channels=s["conv_channels"], hidden=s["hidden"], seed=config.seed)
    if x.shape[1:] != (model.in_channels, model.height, model.width):
        raise CLIError(f"dataset inputs {x.shape[1:]} do not fit the checkpoint")
    with open(out / TRAIN_LOG, "a" if start else "w") as log:
        fit(model, x, sets, config, optimizer=optimizer, histogram=histogram, log=log, start_iteration=start)
    save_tensors(out / CHECKPOINT, {**model.state_tensors(), **optimizer.state_tensors()})
    (out / HISTOGRAMS).write_text(json.dumps(histogram.to_json(), sort_keys=True) + "\n")
    return out / CHECKPOINT


def evaluate(s: Dict[str, Any]) -> Dict[str, Any]:
    """Metrics report for a dataset; also writes ``curve.csv`` to the output directory."""
    out = Path(s["out"])
    data = data_path(s["data"])
    anns = read_dataset(data)
    captcha = bool(anns) and anns[0].is_captcha
    U = s["U"] if s["U"] is not None else (CAPTCHA_U if captcha else DETECTION_U)
    thr = s["iou"]
    gts = [a.target_boxes() for a in anns]
    report: Dict[str, Any] = {"n_images": len(anns), "U": U, "iou": thr}
    if s["oracle"]:
        curve_dets = [(g, np.ones(len(g))) for g in gts]
        map_dets, map_slots = curve_dets, [list(range(len(g))) for g in gts]
        card_hits = len(anns)
    else:
        model, _ = _load_model(s["checkpoint"])
        x, _ = load_arrays(data, anns, captcha_size=(model.height, model.width))
        if x.shape[1:] != (model.in_channels, model.height, model.width):
            raise CLIError(f"dataset inputs {x.shape[1:]} do not fit the checkpoint "
                           f"{(model.in_channels, model.height, model.width)}")
        outputs = predict(model, x)
        curve_dets, map_dets, map_slots = [], [], []
        card_hits = 0
        for i in range(len(anns)):
            o = outputs[i]
            # the curves ignore the cardinality head and sweep the slot scores
            every = infer(o, InferenceConfig(U=U, mode="threshold", tau=1e-12), with_permutation=False)
            curve_dets.append((every.boxes(), every.scores()))
            pred = infer(o, InferenceConfig(U=U))
            map_dets.append((pred.boxes(), pred.scores()))
            map_slots.append(pred.labels)
            card_hits += int(np.argmax(o.alpha)) == len(gts[i])
    curve = pr_curve(curve_dets, gts, thr)
    bf1, bf1_tau = best_f1(curve)
    counts = point_counts(map_dets, gts, thr)
    report.update({
        "ap": average_precision(curve_dets, gts, thr),
        "best_f1": bf1,
        "best_f1_tau": bf1_tau,
        "mr": log_average_miss_rate(curve),
        "point_f1": counts.f1,
        "precision": counts.precision,
        "recall": counts.recall,
        "cardinality_accuracy": card_hits / max(len(anns), 1),
        "occlusion_f1": occlusion_binned_f1(map_dets, gts, thr),
    })
    if captcha:
        report["captcha_accuracy"] = captcha_accuracy([b for b, _ in map_dets], gts, thr)
    elif any(a.identities for a in anns):
        report["identification_accuracy"] = identification_accuracy(
            [b for b, _ in map_dets], map_slots, gts, [a.identities for a in anns], thr)
    write_curve_csv(out / "curve.csv", curve)
    return report


def cmd_eval(s: Dict[str, Any]) -> Path:
    out = Path(s["out"])
    echo_config(out, "eval", s)
    report = evaluate(s)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return out / "metrics.json"


def _read_image(path: str) -> np.ndarray:
    p = data_path(path)
    if p.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        return read_pnm(p)
    from PIL import Image

    try:
        return np.asarray(Image.open(p))
    except OSError as exc:
        raise CLIError(f"cannot read image {p}: {exc}") from None


def cmd_infer(s: Dict[str, Any], images: Sequence[str]) -> Path:
    out = Path(s["out"])
    echo_config(out, "infer", {**s, "images": " ".join(images)})
    if not images:
        raise CLIError("no input images")
    try:
        config = InferenceConfig(U=s["U"], mode=s["mode"], tau=s["tau"])
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    model, _ = _load_model(s["checkpoint"])
    query = _read_image(s["query"]) if s["query"] else None
    if model.in_channels == 2 and query is None:
        raise CLIError("this model answers puzzles and needs --query")
    records = []
    for path in images:
        img = _read_image(path)
        if query is not None:
            x = captcha_input(img, query, (model.height, model.width))
        else:
            x = image_input(img)
        if x.shape != (model.in_channels, model.height, model.width):
            raise CLIError(f"{path}: input {x.shape} does not fit the checkpoint "
                           f"{(model.in_channels, model.height, model.width)}")
        pred = infer(model.forward(x[None])[0], config)
        records.append({
            "image": path,
            "cardinality": pred.cardinality,
            "boxes": [[e.x, e.y, e.w, e.h, e.s] for e in pred.elements],
            "slots": pred.slots,
            "permutation": pred.ordering,
            "labels": pred.labels,
        })
    with open(out / "predictions.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r) + "\n")
    return out / "predictions.jsonl"


# -- argument parsing ----------------------------------------------------------------------------

class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error: {message}\n")


def _add_options(p: argparse.ArgumentParser, options: List[Option]) -> None:
    p.add_argument("--config", help="flat key = value settings file")
    for o in options:
        default = "" if o.default is None else f" (default {o.default})"
        p.add_argument(f"--{o.key.replace('_', '-')}", dest=o.key, type=o.kind, default=None,
                       help=f"{o.help}{default}")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="permset", description="Set prediction with a three-headed network.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    tasks = gen.add_subparsers(dest="task", required=True, parser_class=Parser)
    _add_options(tasks.add_parser("shapes", help="colored blob scenes"), SHAPES_OPTIONS)
    _add_options(tasks.add_parser("captcha", help="subset-sum digit puzzles"), CAPTCHA_OPTIONS)
    _add_options(sub.add_parser("train", help="train a model"), TRAIN_OPTIONS)
    _add_options(sub.add_parser("eval", help="score a model on a dataset"), EVAL_OPTIONS)
    p = sub.add_parser("infer", help="predict sets for images")
    _add_options(p, INFER_OPTIONS)
    p.add_argument("images", nargs="*", help="input images (PPM/PGM or anything Pillow reads)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> Path:
    args = build_parser().parse_args(argv)
    name = f"gen {args.task}" if args.command == "gen" else args.command
    flags = vars(args)
    file_values = read_config_file(args.config) if args.config else {}
    settings = resolve(COMMANDS[name], file_values, flags)
    if name == "gen shapes":
        return cmd_gen_shapes(settings)
    if name == "gen captcha":
        return cmd_gen_captcha(settings)
    if name == "train":
        return cmd_train(settings)
    if name == "eval":
        return cmd_eval(settings)
    return cmd_infer(settings, args.images)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        result = run(argv)
    except (CLIError, CheckpointError, DatasetError, IDXError, PNMError, ShapeError, ValueError, OSError) as exc:
        msg = str(exc)
        if isinstance(exc, OSError) and exc.filename:
            msg = f"{exc.strerror}: {exc.filename}"
        print(f"error: {msg}", file=sys.stderr)
        return 1
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
