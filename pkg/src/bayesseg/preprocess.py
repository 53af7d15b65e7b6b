"""Intensity normalization and center cropping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError

NORM_MODES = ("variance", "std")


@dataclass(frozen=True)
class Normalizer:
    """``(x - mean) / variance`` by default; ``mode="std"`` divides by the standard deviation."""

    mean: float
    variance: float
    mode: str = "variance"

    def __post_init__(self):
        if not self.variance > 0:
            raise DomainError(f"normalization variance must be positive, got {self.variance}")
        if self.mode not in NORM_MODES:
            raise DomainError(f"normalization mode must be one of {NORM_MODES}, got {self.mode!r}")

    @property
    def divisor(self) -> float:
        return self.variance if self.mode == "variance" else float(np.sqrt(self.variance))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        out = (np.asarray(images, dtype=np.float64) - self.mean) / self.divisor
        return out.astype(np.float32)

    @classmethod
    def fit(cls, images: np.ndarray, mode: str = "variance") -> "Normalizer":
        x = np.asarray(images, dtype=np.float64)
        var = float(x.var())
        if not var > 0 or np.ptp(x) == 0:
            raise DomainError("training images have zero variance")
        return cls(float(x.mean()), var, mode)


def center_crop(images: np.ndarray, crop: int) -> np.ndarray:
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if crop > h or crop > w or crop < 1:
        raise DimensionError(f"crop {crop} does not fit images of size {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    return images[..., top:top + crop, left:left + crop]


def normalize_and_crop(images: np.ndarray, stats: dict, crop: int, mode: str = "variance") -> np.ndarray:
    """Center crop, then normalize with dataset-level ``stats = {"mean", "variance"}``."""
    norm = Normalizer(float(stats["mean"]), float(stats["variance"]), mode)
    return norm(center_crop(images, crop))
