"""Synthetic chest-phantom generator and manifest-based dataset I/O.

A phantom is a dark field with two bright elliptical "lung fields". Abnormal
phantoms carry 1-3 additive lesions whose rendering depends on the disease
domain, so the exact lesion support is known and localisation can be scored.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .core import (
    BoundingBox,
    ConfigError,
    DomainLabel,
    denormalize_image,
    normalize_image,
)

log = logging.getLogger(__name__)

LUNG_VALUE = 0.2
BACKGROUND = -1.0
MAX_PLACEMENT_ATTEMPTS = 100
MANIFEST_FIELDS = ["id", "image_path", "label", "mask_path", "boxes_path"]
BOX_FIELDS = ["image_id", "x_min", "y_min", "x_max", "y_max"]


class PhantomError(RuntimeError):
    """Lesion placement failed within the rejection-sampling budget."""


class ManifestError(ValueError):
    """A manifest row or a file it references could not be parsed."""


@dataclass
class Sample:
    image: np.ndarray
    label: Optional[int]  # None for normal samples
    id: str
    gt_mask: Optional[np.ndarray] = None
    gt_boxes: Optional[list[BoundingBox]] = None

    @property
    def abnormal(self) -> bool:
        return self.label is not None


Dataset = list  # list[Sample], in manifest order


@dataclass
class PhantomConfig:
    image_size: int = 64
    n_normal: int = 0
    n_abnormal: int = 0
    n_domains: int = 3
    lesions_per_image: tuple[int, int] = (1, 3)
    lesion_radius: tuple[int, int] = (3, 8)
    lesion_contrast: float = 0.5
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        self.lesions_per_image = tuple(int(v) for v in self.lesions_per_image)
        self.lesion_radius = tuple(int(v) for v in self.lesion_radius)
        self.validate()

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 4:
            raise ConfigError(f"image_size must be >= 16 and divisible by 4, got {self.image_size}")
        if self.n_normal < 0 or self.n_abnormal < 0:
            raise ConfigError("sample counts must be >= 0")
        if self.n_domains < 1:
            raise ConfigError("n_domains must be >= 1")
        lo, hi = self.lesions_per_image
        if not 1 <= lo <= hi:
            raise ConfigError(f"invalid lesions_per_image range {self.lesions_per_image}")
        rlo, rhi = self.lesion_radius
        if not 1 <= rlo <= rhi:
            raise ConfigError(f"invalid lesion_radius range {self.lesion_radius}")
        # the largest lesion must fit inside the flat part of a lung field
        semi_x, _ = _lung_axes(self.image_size)
        if rhi + 1 > 0.85 * semi_x:
            raise ConfigError(
                f"lesion radius {rhi} does not fit a lung field of half-width {semi_x:.1f}px"
            )
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lesions_per_image"] = list(self.lesions_per_image)
        d["lesion_radius"] = list(self.lesion_radius)
        return d


def sample_rng(seed: int, abnormal: bool, index: int) -> np.random.Generator:
    """Independent RNG substream for one phantom."""
    return np.random.default_rng([int(seed), int(abnormal), int(index)])


def _lung_axes(size: int) -> tuple[float, float]:
    return 0.2 * size, 0.38 * size


def _lung_fields(size: int, rng: np.random.Generator) -> tuple[np.ndarray, list[np.ndarray]]:
    """Return the anatomy image and, per lung, its normalised elliptic radius."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    semi_x, semi_y = _lung_axes(size)
    weight = np.zeros((size, size))
    radii = []
    for cx_frac in (0.27, 0.73):
        cx = cx_frac * size + rng.uniform(-1.0, 1.0)
        cy = 0.5 * size + rng.uniform(-1.0, 1.0)
        ax = semi_x * rng.uniform(0.97, 1.03)
        ay = semi_y * rng.uniform(0.97, 1.03)
        r = np.sqrt(((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2)
        radii.append(r)
        # smoothstep falloff between r = 0.9 and r = 1.1
        t = np.clip((1.1 - r) / 0.2, 0.0, 1.0)
        weight = np.maximum(weight, t * t * (3 - 2 * t))
    anatomy = BACKGROUND + (LUNG_VALUE - BACKGROUND) * weight
    return anatomy, radii


def _lesion(domain: int, radius: int, min_radius: int, size: int, cy: float, cx: float,
            contrast: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Render one lesion; returns (support mask, additive intensity)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    style = domain % 3
    if style == 0:
        # solid ellipse, axis-aligned, the short axis never below the radius floor
        short = max(float(min_radius), radius * rng.uniform(0.7, 1.0))
        if rng.random() < 0.5:
            ry, rx = float(radius), short
        else:
            ry, rx = short, float(radius)
        support = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        value = np.full((size, size), contrast)
    else:
        dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        support = dist <= radius
        if style == 1:
            # ring: bright rim around a dim core
            value = np.where(dist >= 0.55 * radius, contrast, 0.35 * contrast)
        else:
            # diffuse speckled patch, every pixel keeps at least 40% contrast
            value = contrast * (0.4 + 0.6 * rng.random((size, size)))
    return support, np.where(support, value, 0.0)


def _valid_centres(lung_radii: list[np.ndarray], radius: int) -> np.ndarray:
    """Pixels where a disc of ``radius`` (plus a 1px rim) sits inside a lung plateau."""
    yy, xx = np.mgrid[-radius - 1:radius + 2, -radius - 1:radius + 2]
    disc = yy ** 2 + xx ** 2 <= (radius + 1) ** 2
    fits = np.zeros_like(lung_radii[0], dtype=bool)
    for r in lung_radii:
        fits |= ndimage.binary_erosion(r < 0.9, structure=disc, border_value=0)
    return np.argwhere(fits)


def _place_lesions(lung_radii: list[np.ndarray], radii: list[int],
                   rng: np.random.Generator, sample_id: str) -> list[tuple[int, int, int]]:
    """Rejection-sample non-touching lesion centres; each attempt places the whole set."""
    candidates = {r: _valid_centres(lung_radii, r) for r in set(radii)}
    for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
        placed: list[tuple[int, int, int]] = []
        for radius in radii:
            centres = candidates[radius]
            if placed and len(centres):
                # a 1px gap keeps every lesion its own 4-connected component
                ok = np.ones(len(centres), dtype=bool)
                for py, px, pr in placed:
                    d2 = (centres[:, 0] - py) ** 2 + (centres[:, 1] - px) ** 2
                    ok &= d2 > (radius + pr + 2) ** 2
                centres = centres[ok]
            if len(centres) == 0:
                break
            cy, cx = (int(v) for v in centres[int(rng.integers(0, len(centres)))])
            placed.append((cy, cx, radius))
        else:
            return placed
    raise PhantomError(
        f"could not place {len(radii)} lesions of radii {radii} in {sample_id or 'phantom'} "
        f"after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def _tight_box(support: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(support)
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def generate_phantom(cfg: PhantomConfig, domain: Optional[int], abnormal: bool,
                     rng: np.random.Generator, sample_id: str = "") -> Sample:
    """Render one phantom. ``domain`` is ignored (and may be None) for normal samples."""
    size = cfg.image_size
    anatomy, lung_radii = _lung_fields(size, rng)
    lesion_layer = np.zeros((size, size))
    gt_mask = np.zeros((size, size), dtype=np.uint8)
    boxes: list[BoundingBox] = []
    label = None
    if abnormal:
        label = DomainLabel(int(domain), cfg.n_domains).index
        n_lesions = int(rng.integers(cfg.lesions_per_image[0], cfg.lesions_per_image[1] + 1))
        radii = rng.integers(cfg.lesion_radius[0], cfg.lesion_radius[1] + 1, size=n_lesions)
        # largest first: packing succeeds far more often
        radii = sorted((int(r) for r in radii), reverse=True)
        placed = _place_lesions(lung_radii, radii, rng, sample_id)
        for cy, cx, radius in placed:
            support, value = _lesion(label, radius, cfg.lesion_radius[0], size, cy, cx, cfg.lesion_contrast, rng)
            lesion_layer += value
            gt_mask[support] = 1
            boxes.append(_tight_box(support))
    noise = rng.normal(0.0, cfg.noise_sigma, (size, size)) if cfg.noise_sigma > 0 else 0.0
    image = np.clip(anatomy + lesion_layer + noise, -1.0, 1.0).astype(np.float32)
    return Sample(image=image, label=label, id=sample_id, gt_mask=gt_mask, gt_boxes=boxes)


def generate_dataset(cfg: PhantomConfig) -> list[Sample]:
    """In-memory phantom set: normals first, then abnormals cycling through domains."""
    samples = [
        generate_phantom(cfg, None, False, sample_rng(cfg.seed, False, i), f"normal_{i:05d}")
        for i in range(cfg.n_normal)
    ]
    samples += [
        generate_phantom(cfg, i % cfg.n_domains, True, sample_rng(cfg.seed, True, i), f"abnormal_{i:05d}")
        for i in range(cfg.n_abnormal)
    ]
    return samples


# --------------------------------------------------------------------------- file I/O

def write_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        PILImage.fromarray(np.ascontiguousarray(array, dtype=np.uint8), mode="L").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed to write {path}: {exc}") from exc


def read_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_boxes_csv(path: Path, image_id: str, boxes: Sequence[BoundingBox]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BOX_FIELDS)
        for b in boxes:
            writer.writerow([image_id, *b])


def read_boxes_csv(path: Path) -> list[BoundingBox]:
    boxes = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return boxes
        missing = set(BOX_FIELDS[1:]) - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}: missing box columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                boxes.append(BoundingBox(*(int(row[k]) for k in BOX_FIELDS[1:])))
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: malformed box row {row}") from exc
    return boxes


def synthesize_dataset(cfg: PhantomConfig, out_dir) -> Path:
    """Write a phantom dataset (PNGs, mask PNGs, box CSVs, manifest) and return the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for s in generate_dataset(cfg):
        image_rel = f"images/{s.id}.png"
        write_png(out / image_rel, denormalize_image(s.image))
        mask_rel = boxes_rel = ""
        if s.abnormal:
            mask_rel, boxes_rel = f"masks/{s.id}.png", f"boxes/{s.id}.csv"
            write_png(out / mask_rel, s.gt_mask * 255)
            write_boxes_csv(out / boxes_rel, s.id, s.gt_boxes)
        rows.append([s.id, image_rel, "normal" if s.label is None else s.label, mask_rel, boxes_rel])
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)
    log.info("wrote %d samples to %s", len(rows), out)
    return manifest


def _resolve(base: Path, rel: str, lineno: int, manifest: Path) -> Path:
    p = base / rel
    if not p.is_file():
        raise ManifestError(f"{manifest}:{lineno}: referenced file not found: {p}")
    return p


def load_manifest(path, n_domains: Optional[int] = None) -> list[Sample]:
    """Load samples listed in a manifest CSV, in file order.

    Columns: ``id,image_path,label[,mask_path,boxes_path]``; ``label`` is an
    integer domain index or ``normal``. Paths are relative to the manifest.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    samples: list[Sample] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return samples
        missing = {"id", "image_path", "label"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}:1: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if None in row or any(row.get(k) is None for k in ("id", "image_path", "label")):
                raise ManifestError(f"{path}:{lineno}: malformed row")
            raw_label = row["label"].strip()
            if raw_label.lower() == "normal":
                label = None
            else:
                try:
                    label = int(raw_label)
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: bad label {raw_label!r}") from None
                if label < 0 or (n_domains is not None and label >= n_domains):
                    raise ManifestError(
                        f"{path}:{lineno}: label {label} out of range for {n_domains} domains")
            image_file = _resolve(base, row["image_path"], lineno, path)
            try:
                image = normalize_image(read_png(image_file))
            except (OSError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: cannot read image {image_file}: {exc}") from exc
            gt_mask = gt_boxes = None
            if row.get("mask_path"):
                mask = read_png(_resolve(base, row["mask_path"], lineno, path))
                if mask.shape != image.shape:
                    raise ManifestError(f"{path}:{lineno}: mask shape {mask.shape} != image {image.shape}")
                gt_mask = (mask > 127).astype(np.uint8)
            if row.get("boxes_path"):
                gt_boxes = read_boxes_csv(_resolve(base, row["boxes_path"], lineno, path))
            samples.append(Sample(image=image, label=label, id=row["id"],
                                  gt_mask=gt_mask, gt_boxes=gt_boxes))
    return samples


def iterate_minibatches(ds: Sequence[Sample], batch_size: int, epoch_seed: int) -> Iterator[list[Sample]]:
    """Shuffled minibatches covering ``ds`` exactly once; order depends only on ``epoch_seed``."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if len(ds) == 0:
        raise ConfigError("cannot iterate over an empty dataset")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        yield [ds[i] for i in order[start:start + batch_size]]
