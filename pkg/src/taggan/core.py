"""Shared value types and the map-subtraction primitive.

Images are float arrays in [-1, 1] of shape (H, W). Torch tensors of shape
(N, 1, H, W) are accepted wherever arithmetic is shape-agnostic, so the same
``subtract_map`` runs inside the training graph.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

MIN_SIZE = 16
MAP_RANGE = 2.0


class ShapeError(ValueError):
    """Raised when arrays that must share a shape do not."""


class DomainError(ValueError):
    """Raised when a value lies outside its admissible domain."""


class ConfigError(ValueError):
    """Raised for invalid configurations or unusable inputs."""


class BoundingBox(NamedTuple):
    """Axis-aligned box with inclusive pixel coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min + 1) * (self.y_max - self.y_min + 1)

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.x_min <= self.x_max < width and 0 <= self.y_min <= self.y_max < height):
            raise DomainError(f"box {tuple(self)} outside {height}x{width} frame")


BoxSet = list  # ordered list[BoundingBox]


@dataclass(frozen=True)
class DomainLabel:
    index: int
    n_domains: int

    def __post_init__(self) -> None:
        if self.n_domains < 1:
            raise DomainError(f"n_domains must be >= 1, got {self.n_domains}")
        if not 0 <= self.index < self.n_domains:
            raise DomainError(f"label {self.index} out of range [0, {self.n_domains})")


def one_hot(index: int, n_domains: int) -> np.ndarray:
    """Return the length-``n_domains`` indicator vector of ``index``."""
    label = DomainLabel(int(index), int(n_domains))
    vec = np.zeros(label.n_domains, dtype=np.float32)
    vec[label.index] = 1.0
    return vec


def validate_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2:
        raise ShapeError(f"image must be 2-D, got shape {x.shape}")
    h, w = x.shape
    if h < MIN_SIZE or w < MIN_SIZE or h % 4 or w % 4:
        raise ShapeError(f"image size {h}x{w} must be >= {MIN_SIZE} and divisible by 4")
    if not np.all(np.isfinite(x)) or x.min() < -1.0 or x.max() > 1.0:
        raise DomainError("image values must be finite and within [-1, 1]")
    return x


def subtract_map(x, m, clamp: bool = True):
    """Counterfactual image ``x - m``, clipped to [-1, 1] unless ``clamp=False``.

    Works on numpy arrays and torch tensors alike (both expose ``.clip``).
    Training uses the unclipped difference: clipping would let the map take
    arbitrary positive values wherever ``x`` is already at -1 without any
    loss noticing.
    """
    if tuple(x.shape) != tuple(m.shape):
        raise ShapeError(f"image shape {tuple(x.shape)} != map shape {tuple(m.shape)}")
    diff = x - m
    return diff.clip(-1.0, 1.0) if clamp else diff


def normalize_image(raw: np.ndarray) -> np.ndarray:
    """Map 8-bit gray levels linearly onto [-1, 1] (0 -> -1, 255 -> 1)."""
    raw = np.asarray(raw)
    if raw.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale array, got shape {raw.shape}")
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise DomainError("raw gray levels must lie in [0, 255]")
    return raw.astype(np.float32) / 127.5 - 1.0


def denormalize_image(x: np.ndarray, value_range: float = 1.0) -> np.ndarray:
    """Inverse of :func:`normalize_image`, rounded to uint8.

    ``value_range`` rescales symmetric ranges other than [-1, 1]; disease maps
    are written with ``value_range=MAP_RANGE``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D array, got shape {x.shape}")
    scaled = (x / value_range + 1.0) * 127.5
    return np.clip(np.rint(scaled), 0, 255).astype(np.uint8)


def boxes_from_rows(rows: Sequence[Sequence[int]]) -> list[BoundingBox]:
    return [BoundingBox(*(int(v) for v in row)) for row in rows]
