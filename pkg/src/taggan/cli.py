"""Command-line interface: synth, train, tag, eval, report.

Exit codes: 0 success, 1 I/O or bad input file, 2 configuration or usage,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, ConfigError, DomainError, denormalize_image, normalize_image
from .data import (
    ManifestError,
    PhantomConfig,
    PhantomError,
    load_manifest,
    read_boxes_csv,
    read_png,
    synthesize_dataset,
    write_boxes_csv,
    write_png,
)
from .losses import LossWeights
from .metrics import MODES, compare_external, evaluate_dataset
from .model import ArchConfig
from .tagging import ConstraintConfig, tag_image
from .trainer import CheckpointError, DivergenceError, TrainConfig, load_checkpoint, save_checkpoint, train

log = logging.getLogger("taggan")

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png",)

# (flag, type, default, help); dest is the flag name with dashes replaced.
COMMON = [
    ("--seed", int, 0, "random seed"),
    ("--out", str, None, "output directory"),
]
CONSTRAINT = [
    ("--threshold-method", str, "otsu", "otsu or fixed"),
    ("--fixed-threshold", float, 0.1, "|map| threshold for the fixed method"),
    ("--min-threshold", float, ConstraintConfig.min_threshold, "floor applied to the Otsu threshold"),
    ("--min-component-area", int, None, "drop mask components smaller than this (default scales with image size)"),
]
OPTIONS = {
    "synth": [
        ("--n-normal", int, 100, "number of normal phantoms"),
        ("--n-abnormal", int, 100, "number of abnormal phantoms"),
        ("--n-domains", int, 3, "number of disease domains"),
        ("--image-size", int, 64, "phantom side length in pixels"),
        ("--min-lesions", int, 1, "fewest lesions per abnormal phantom"),
        ("--max-lesions", int, 3, "most lesions per abnormal phantom"),
        ("--min-lesion-radius", int, 3, "smallest lesion radius in pixels"),
        ("--max-lesion-radius", int, 8, "largest lesion radius in pixels"),
        ("--lesion-contrast", float, 0.5, "lesion intensity added to the lung field"),
        ("--noise-sigma", float, 0.05, "Gaussian noise std"),
    ],
    "train": [
        ("--manifest", str, None, "training manifest.csv"),
        ("--val-manifest", str, None, "validation manifest.csv (enables early stopping)"),
        ("--n-domains", int, 3, "number of disease domains"),
        ("--epochs", int, 100, "training epochs"),
        ("--batch-size", int, 1, "minibatch size"),
        ("--learning-rate", float, 0.001, "Adam learning rate"),
        ("--adam-beta1", float, 0.5, "Adam beta1"),
        ("--adam-beta2", float, 0.999, "Adam beta2"),
        ("--validate-every", int, 5, "iterations between validation rounds"),
        ("--patience", int, 10, "validation rounds without improvement before stopping (0 disables)"),
        ("--lambda-cyc", float, 10.0, "cycle-consistency weight"),
        ("--lambda-dcl", float, 1.0, "domain-classification weight"),
        ("--base-channels", int, 16, "width of the first conv layer"),
        ("--n-residual-blocks", int, 2, "generator residual blocks"),
        ("--checkpoint-every", int, 0, "also save checkpoint_epochNNN.ckpt every N epochs (0 = never)"),
        ("--resume", str, None, "continue from this checkpoint"),
    ],
    "tag": [
        ("--checkpoint", str, None, "trained model checkpoint"),
        ("--input", str, None, "PNG image or directory of PNG images"),
        ("--label", int, None, "disease-domain label of the input(s)"),
        *CONSTRAINT,
    ],
    "eval": [
        ("--checkpoint", str, None, "trained model checkpoint"),
        ("--manifest", str, None, "manifest with ground-truth boxes"),
        ("--external", str, None, "directory of third-party predictions to score instead of a model"),
        *CONSTRAINT,
    ],
    "report": [
        ("--tags", str, None, "output directory of the tag command"),
        ("--input", str, None, "the images that were tagged (default: paths recorded in the sidecars)"),
        ("--manifest", str, None, "manifest supplying ground-truth boxes"),
    ],
}
REQUIRED = {
    "synth": ["out"],
    "train": ["manifest", "out"],
    "tag": ["checkpoint", "input", "label", "out"],
    "eval": ["manifest", "out"],
    "report": ["tags", "out"],
}
HELP = {
    "synth": "write a synthetic phantom dataset",
    "train": "train a model on a manifest",
    "tag": "produce map, mask, boxes and counterfactual for images",
    "eval": "score a model (or external predictions) against ground truth",
    "report": "render a figure grid from tag outputs",
}


class MissingOptionError(ConfigError):
    pass


def _dest(flag: str) -> str:
    return flag.lstrip("-").replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taggan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}
    for cmd, opts in OPTIONS.items():
        p = parser.subcommands[cmd] = sub.add_parser(cmd, help=HELP[cmd])
        p.add_argument("--config", help="JSON file of option values; flags override it")
        for flag, typ, default, text in [*COMMON, *opts]:
            p.add_argument(flag, type=typ, default=argparse.SUPPRESS,
                           help=f"{text} (default: {default})")
    return parser


def resolve_options(cmd: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the ``--config`` file, then explicit flags."""
    specs = [*COMMON, *OPTIONS[cmd]]
    values = {_dest(flag): default for flag, _, default, _ in specs}
    types = {_dest(flag): typ for flag, typ, _, _ in specs}
    if getattr(ns, "config", None):
        try:
            data = json.loads(Path(ns.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{ns.config}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{ns.config}: expected a JSON object")
        unknown = sorted(set(data) - set(values))
        if unknown:
            raise ConfigError(f"{ns.config}: unknown key(s) for '{cmd}': {', '.join(unknown)}")
        for key, val in data.items():
            if val is not None and not isinstance(val, types[key]) and not (types[key] is float and isinstance(val, int)):
                raise ConfigError(f"{ns.config}: {key} must be {types[key].__name__}")
            values[key] = types[key](val) if val is not None else None
    for key in values:
        if hasattr(ns, key):
            values[key] = getattr(ns, key)
    missing = [k for k in REQUIRED[cmd] if values.get(k) is None]
    if missing:
        raise MissingOptionError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return values


def _constraint(opts: dict, image_size: int) -> ConstraintConfig:
    kw = dict(method=opts["threshold_method"], fixed_threshold=opts["fixed_threshold"],
              min_threshold=opts["min_threshold"])
    if opts["min_component_area"] is not None:
        kw["min_component_area"] = opts["min_component_area"]
    return ConstraintConfig.for_size(image_size, **kw)


# --------------------------------------------------------------------------- commands

def cmd_synth(opts: dict) -> Path:
    cfg = PhantomConfig(image_size=opts["image_size"], n_normal=opts["n_normal"], n_abnormal=opts["n_abnormal"],
                        n_domains=opts["n_domains"], lesion_contrast=opts["lesion_contrast"],
                        lesions_per_image=(opts["min_lesions"], opts["max_lesions"]),
                        lesion_radius=(opts["min_lesion_radius"], opts["max_lesion_radius"]),
                        noise_sigma=opts["noise_sigma"], seed=opts["seed"])
    path = synthesize_dataset(cfg, opts["out"])
    print(path)
    return path


def train_config(opts: dict, image_size: int) -> TrainConfig:
    arch = ArchConfig(n_domains=opts["n_domains"], image_size=image_size, base_channels=opts["base_channels"],
                      n_residual_blocks=opts["n_residual_blocks"])
    return TrainConfig(
        batch_size=opts["batch_size"], learning_rate=opts["learning_rate"], adam_beta1=opts["adam_beta1"],
        adam_beta2=opts["adam_beta2"], epochs=opts["epochs"], validate_every=opts["validate_every"],
        patience=opts["patience"] or None, seed=opts["seed"],
        weights=LossWeights(opts["lambda_cyc"], opts["lambda_dcl"]), arch=arch,
    )


def cmd_train(opts: dict) -> Path:
    train_ds = load_manifest(opts["manifest"], opts["n_domains"])
    if not train_ds:
        raise ConfigError(f"{opts['manifest']}: manifest is empty")
    val_ds = load_manifest(opts["val_manifest"], opts["n_domains"]) if opts["val_manifest"] else None
    cfg = train_config(opts, train_ds[0].image.shape[0])
    resume = load_checkpoint(opts["resume"]) if opts["resume"] else None
    out = Path(opts["out"])

    def progress(state) -> None:
        tail = state.log_tail
        msg = f"epoch {state.epoch}/{cfg.epochs} iter {state.iteration}"
        if tail is not None:
            msg += f" total_g={tail.total_g:.4f} total_d={tail.total_d:.4f} l_cyc={tail.l_cyc:.4f}"
        print(msg, file=sys.stderr, flush=True)

    ckpt = train(cfg, train_ds, val_ds, out_dir=out, checkpoint_every=opts["checkpoint_every"] or None,
                 resume=resume, progress=progress)
    path = save_checkpoint(ckpt, out / "model.ckpt")
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"checkpoint: {path}")
    if ckpt.log_tail:
        print("final losses: " + " ".join(f"{k}={v:.6g}" for k, v in ckpt.log_tail.items()))
    return path


def _image_paths(path: Path) -> tuple[list[Path], bool]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise FileNotFoundError(f"no PNG images in {path}")
        return files, True
    if not path.is_file():
        raise FileNotFoundError(f"input not found: {path}")
    return [path], False


def _read_input(path: Path, size: int) -> np.ndarray:
    raw = read_png(path)
    if raw.shape != (size, size):
        raise ConfigError(f"{path}: image is {raw.shape[1]}x{raw.shape[0]}, model expects {size}x{size}")
    return normalize_image(raw)


def write_tag_result(res, out_dir: Path, source: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png(out_dir / "map.png", denormalize_image(res.disease_map, value_range=2.0))
    write_png(out_dir / "mask.png", (res.mask > 0).astype(np.uint8) * 255)
    write_boxes_csv(out_dir / "boxes.csv", res.input_id, res.boxes_unequal)
    write_png(out_dir / "counterfactual.png", denormalize_image(res.counterfactual_normal))
    side = res.sidecar()
    side["source"] = str(source)
    (out_dir / "sidecar.json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def cmd_tag(opts: dict) -> Path:
    ckpt = load_checkpoint(opts["checkpoint"])
    nets = ckpt.build_nets()
    size, n_domains = nets.arch.image_size, nets.arch.n_domains
    label = opts["label"]
    if not 0 <= label < n_domains:
        raise DomainError(f"label {label} out of range for a {n_domains}-domain model")
    cfg = _constraint(opts, size)
    files, is_dir = _image_paths(Path(opts["input"]))
    out = Path(opts["out"])
    for f in files:
        res = tag_image(nets, _read_input(f, size), label, cfg, input_id=f.stem)
        write_tag_result(res, out / f.stem if is_dir else out, f)
        log.info("%s: %d box(es), threshold %.4f", f.stem, len(res.boxes_unequal), res.threshold.threshold)
    print(out)
    return out


def cmd_eval(opts: dict) -> Path:
    if opts["external"] is None and opts["checkpoint"] is None:
        raise ConfigError("eval needs --checkpoint or --external")
    if opts["external"] is not None:
        ds = load_manifest(opts["manifest"])
        report = compare_external(opts["external"], ds)
    else:
        ckpt = load_checkpoint(opts["checkpoint"])
        ds = load_manifest(opts["manifest"], ckpt.config.arch.n_domains)
        report = evaluate_dataset(ckpt, ds, _constraint(opts, ckpt.config.arch.image_size))
    csv_path, _ = report.write(opts["out"])
    means = report.means()
    print("mode      mean_poi  mean_iou  n_images")
    for mode in MODES:
        m = means[mode]
        print(f"{mode:<9} {m['mean_poi']:8.2f}  {m['mean_iou']:8.4f}  {m['n_images']:8d}")
    return csv_path


# --------------------------------------------------------------------------- report grid

PAD = 2
GT_COLOUR = (0, 200, 0)
PRED_COLOUR = (255, 160, 0)
MASK_COLOUR = np.array([230, 40, 40], dtype=np.float64)


def _gray_rgb(img_u8: np.ndarray) -> np.ndarray:
    return np.repeat(img_u8[:, :, None], 3, axis=2)


def _map_rgb(map_u8: np.ndarray) -> np.ndarray:
    # map.png stores [-2, 2] as [0, 255]; positive red, negative blue, zero white
    m = map_u8.astype(np.float64) / 127.5 - 1.0
    pos, neg = np.clip(m, 0, 1), np.clip(-m, 0, 1)
    rgb = np.stack([1 - neg, 1 - pos - neg, 1 - pos], axis=2)
    return np.rint(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def _draw_boxes(rgb: np.ndarray, boxes, colour) -> np.ndarray:
    out = rgb.copy()
    for b in boxes:
        b = BoundingBox(*b)
        out[b.y_min, b.x_min:b.x_max + 1] = colour
        out[b.y_max, b.x_min:b.x_max + 1] = colour
        out[b.y_min:b.y_max + 1, b.x_min] = colour
        out[b.y_min:b.y_max + 1, b.x_max] = colour
    return out


def _overlay(img_u8: np.ndarray, mask: np.ndarray, gt_boxes) -> np.ndarray:
    rgb = _gray_rgb(img_u8).astype(np.float64)
    sel = mask > 0
    rgb[sel] = 0.5 * rgb[sel] + 0.5 * MASK_COLOUR
    return _draw_boxes(np.rint(rgb).astype(np.uint8), gt_boxes, GT_COLOUR)


def report_row(img_u8: np.ndarray, map_u8: np.ndarray, mask_u8: np.ndarray, gt_boxes, pred_boxes) -> list:
    """input | gt boxes | disease map | binary mask | pred boxes | overlay."""
    gray = _gray_rgb(img_u8)
    return [
        gray,
        _draw_boxes(gray, gt_boxes, GT_COLOUR),
        _map_rgb(map_u8),
        _gray_rgb(np.where(mask_u8 > 0, 255, 0).astype(np.uint8)),
        _draw_boxes(gray, pred_boxes, PRED_COLOUR),
        _overlay(img_u8, mask_u8, gt_boxes),
    ]


def compose_grid(rows: Sequence[list]) -> np.ndarray:
    h, w = rows[0][0].shape[:2]
    n_cols = len(rows[0])
    grid = np.full((len(rows) * (h + PAD) + PAD, n_cols * (w + PAD) + PAD, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, tile in enumerate(row):
            y, x = PAD + r * (h + PAD), PAD + c * (w + PAD)
            grid[y:y + h, x:x + w] = tile
    return grid


def _tag_dirs(tags: Path) -> list[Path]:
    if (tags / "sidecar.json").is_file():
        return [tags]
    dirs = sorted(d for d in tags.iterdir() if (d / "sidecar.json").is_file()) if tags.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no tag outputs (sidecar.json) under {tags}")
    return dirs


def cmd_report(opts: dict) -> Path:
    from PIL import Image

    dirs = _tag_dirs(Path(opts["tags"]))
    gt = {}
    if opts["manifest"]:
        gt = {s.id: s.gt_boxes or [] for s in load_manifest(opts["manifest"])}
    inputs = {}
    if opts["input"]:
        files, _ = _image_paths(Path(opts["input"]))
        inputs = {f.stem: f for f in files}
    rows = []
    for d in dirs:
        for name in ("map.png", "mask.png", "boxes.csv", "sidecar.json"):
            if not (d / name).is_file():
                raise FileNotFoundError(f"missing tag artifact {d / name}")
        side = json.loads((d / "sidecar.json").read_text())
        src = inputs.get(side["input_id"], Path(side.get("source", "")))
        if not src.is_file():
            raise FileNotFoundError(f"input image for {side['input_id']} not found (looked for {src})")
        rows.append(report_row(read_png(src), read_png(d / "map.png"), read_png(d / "mask.png"),
                               gt.get(side["input_id"], []), read_boxes_csv(d / "boxes.csv")))
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "report.png"
    Image.fromarray(compose_grid(rows)).save(path, format="PNG", optimize=False)
    print(path)
    return path


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "tag": cmd_tag, "eval": cmd_eval, "report": cmd_report}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve_options(ns.command, ns)
        COMMANDS[ns.command](opts)
    except DivergenceError as exc:
        print(f"error: {exc} (offending term: {exc.term})", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ConfigError, DomainError, PhantomError) as exc:
        if isinstance(exc, MissingOptionError):
            parser.subcommands[ns.command].print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
