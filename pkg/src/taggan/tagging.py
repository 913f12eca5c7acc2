"""Inference: disease map -> binary mask -> bounding boxes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy import ndimage

from .core import MAP_RANGE, BoundingBox, ConfigError, ShapeError, subtract_map
from .model import TagGANNets, generator_map_forward

OTSU_BINS = 256
FALLBACK_THRESHOLD = 0.1
FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass
class ConstraintConfig:
    method: str = "otsu"
    fixed_threshold: float = FALLBACK_THRESHOLD
    min_component_area: int = 5
    min_threshold: float = 0.3

    def __post_init__(self) -> None:
        if self.method not in ("otsu", "fixed"):
            raise ConfigError(f"unknown threshold method {self.method!r}")
        if not 0 < self.fixed_threshold <= MAP_RANGE:
            raise ConfigError(f"fixed_threshold must lie in (0, {MAP_RANGE}]")
        if self.min_component_area < 0:
            raise ConfigError("min_component_area must be >= 0")
        if not 0 <= self.min_threshold <= MAP_RANGE:
            raise ConfigError(f"min_threshold must lie in [0, {MAP_RANGE}]")

    @classmethod
    def for_size(cls, image_size: int, **kw) -> "ConstraintConfig":
        """Default config with the minimum component area scaled from 5 px at 64x64."""
        kw.setdefault("min_component_area", max(1, round(5 * (image_size / 64) ** 2)))
        return cls(**kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ThresholdInfo:
    threshold: float
    method: str
    fallback: bool = False
    removed_components: int = 0


def otsu_threshold(values: np.ndarray, bins: int = OTSU_BINS, value_range=(0.0, MAP_RANGE)) -> Optional[float]:
    """Otsu threshold of ``values`` on a fixed-range histogram.

    Returns the lower edge of the first foreground bin, or None when every
    value falls into a single bin (nothing to separate).
    """
    hist, edges = np.histogram(np.clip(values, *value_range), bins=bins, range=value_range)
    if np.count_nonzero(hist) < 2:
        return None
    p = hist.astype(np.float64) / hist.sum()
    centres = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centres)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = -1.0
    t = int(np.argmax(between[:-1]))
    return float(edges[t + 1])


def select_threshold(m: np.ndarray, cfg: ConstraintConfig) -> ThresholdInfo:
    if cfg.method == "fixed":
        return ThresholdInfo(float(cfg.fixed_threshold), "fixed")
    tau = otsu_threshold(np.abs(m))
    if tau is None:
        return ThresholdInfo(FALLBACK_THRESHOLD, "otsu", fallback=True)
    return ThresholdInfo(max(tau, cfg.min_threshold), "otsu")


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected labelling; labels follow raster order of each component's first pixel."""
    return ndimage.label(np.asarray(mask) > 0, structure=FOUR_CONNECTED)


def remove_small_components(mask: np.ndarray, min_area: int) -> tuple[np.ndarray, int]:
    labels, n = label_components(mask)
    if n == 0 or min_area <= 1:
        return (labels > 0).astype(np.uint8), 0
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8), int(n - keep[1:].sum())


def constrain_to_mask(m: np.ndarray, cfg: Optional[ConstraintConfig] = None,
                      threshold: Optional[float] = None) -> tuple[np.ndarray, ThresholdInfo]:
    """Binary lesion mask from a signed disease map.

    A pixel is foreground when ``|m| >= tau``; connected components smaller than
    ``cfg.min_component_area`` are then dropped. ``threshold`` overrides the
    configured method (used to re-apply a recorded threshold).
    """
    cfg = cfg or ConstraintConfig()
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"disease map must be 2-D, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("disease map contains non-finite values")
    info = ThresholdInfo(float(threshold), "given") if threshold is not None else select_threshold(m, cfg)
    raw = (np.abs(m) >= info.threshold).astype(np.uint8)
    mask, info.removed_components = remove_small_components(raw, cfg.min_component_area)
    return mask, info


@dataclass
class Component:
    box: BoundingBox
    area: int
    label: int


def mask_components(mask: np.ndarray) -> tuple[list[Component], np.ndarray]:
    """Components sorted by pixel area, largest first; ties keep raster order."""
    labels, n = label_components(mask)
    comps = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = sl
        area = int(np.count_nonzero(labels[sl] == i))
        comps.append(Component(BoundingBox(xs.start, ys.start, xs.stop - 1, ys.stop - 1), area, i))
    comps.sort(key=lambda comp: -comp.area)
    return comps, labels


def extract_boxes(mask: np.ndarray, mode: str = "unequal", k: Optional[int] = None) -> list[BoundingBox]:
    """Tight boxes around 4-connected mask components.

    ``unequal`` returns every component's box (largest area first);
    ``equal`` keeps only the ``k`` largest, ``k`` being the ground-truth count.
    """
    comps, _ = mask_components(mask)
    if mode == "unequal":
        return [c.box for c in comps]
    if mode == "equal":
        if k is None or k < 0:
            raise ValueError("equal mode needs the ground-truth box count k >= 0")
        return [c.box for c in comps[:k]]
    raise ValueError(f"unknown box mode {mode!r}")


def restrict_to_largest(mask: np.ndarray, k: int) -> np.ndarray:
    """Keep only the ``k`` largest components of ``mask``."""
    comps, labels = mask_components(mask)
    keep = np.zeros(len(comps) + 1, dtype=bool)
    for c in comps[:k]:
        keep[c.label] = True
    return keep[labels].astype(np.uint8)


# --------------------------------------------------------------------------- pipeline

def _nets_of(model) -> TagGANNets:
    return model if isinstance(model, TagGANNets) else model.build_nets()


@torch.no_grad()
def generate_disease_map(model, x: np.ndarray, c: int) -> np.ndarray:
    """Disease map for one image; ``model`` is a Checkpoint or TagGANNets."""
    nets = _nets_of(model)
    x = np.asarray(x, dtype=np.float32)
    if x.shape != (nets.arch.image_size, nets.arch.image_size):
        raise ShapeError(f"image shape {x.shape} does not match model size {nets.arch.image_size}")
    m = generator_map_forward(nets, torch.from_numpy(x)[None, None], int(c))
    return m[0, 0].numpy()


@dataclass
class TagResult:
    input_id: str
    disease_map: np.ndarray
    mask: np.ndarray
    boxes_equal: list
    boxes_unequal: list
    counterfactual_normal: np.ndarray
    threshold: ThresholdInfo
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)

    def sidecar(self) -> dict:
        return {
            "input_id": self.input_id,
            "threshold": self.threshold.threshold,
            "threshold_method": self.threshold.method,
            "fallback": self.threshold.fallback,
            "removed_components": self.threshold.removed_components,
            "constraint": self.constraint.to_dict(),
            "n_boxes_unequal": len(self.boxes_unequal),
            "n_boxes_equal": len(self.boxes_equal),
        }


def tag_image(model, x: np.ndarray, c: int, cfg: Optional[ConstraintConfig] = None,
              input_id: str = "", k: Optional[int] = None) -> TagResult:
    """Map, mask, boxes and counterfactual normal for one abnormal-labelled image.

    ``k`` (the ground-truth box count) drives equal mode; without it equal mode
    returns the same boxes as unequal mode.
    """
    nets = _nets_of(model)
    cfg = cfg or ConstraintConfig.for_size(nets.arch.image_size)
    m = generate_disease_map(nets, x, c)
    mask, info = constrain_to_mask(m, cfg)
    unequal = extract_boxes(mask, "unequal")
    equal = unequal if k is None else extract_boxes(mask, "equal", k)
    cf = subtract_map(np.asarray(x, dtype=np.float32), m)
    return TagResult(input_id, m, mask, equal, unequal, cf, info, cfg)
