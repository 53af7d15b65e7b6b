"""Segmentation accuracy (Dice, ASSD, Hausdorff) and calibration (NLL, Brier) metrics.

Distances are Euclidean between pixel centers scaled by the pixel spacing.
Contours use 4-connectivity: a region pixel is on the contour when at least
one of its four neighbours (or the image border) lies outside the region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DimensionError, DomainError, UndefinedMetricError

STRUCTURES = {"lv": 1, "myo": 2, "rv": 3}
LOG_CLAMP = 1e-12
_CROSS = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class BinaryRegion:
    mask: np.ndarray
    pixel_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))
        sr, sc = self.pixel_spacing
        if not (sr > 0 and sc > 0):
            raise DomainError(f"pixel spacing must be positive, got {self.pixel_spacing}")

    @property
    def diagonal_mm(self) -> float:
        h, w = self.mask.shape
        sr, sc = self.pixel_spacing
        return float(np.sqrt((h * sr) ** 2 + (w * sc) ** 2))


@dataclass(frozen=True)
class Contour:
    pixels: np.ndarray   # (K, 2) integer (row, col)
    points_mm: np.ndarray  # (K, 2) float64

    def __len__(self) -> int:
        return len(self.pixels)


def _region(r, spacing=None) -> BinaryRegion:
    if isinstance(r, BinaryRegion):
        return r
    return BinaryRegion(r, spacing if spacing is not None else (1.0, 1.0))


def dice(a, b) -> float:
    a, b = _region(a), _region(b)
    if a.mask.shape != b.mask.shape:
        raise DimensionError(f"dice: shapes {a.mask.shape} and {b.mask.shape} differ")
    sa, sb = int(a.mask.sum()), int(b.mask.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a.mask, b.mask).sum()) / (sa + sb)


def contour_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    inner = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~inner


def extract_contour(r) -> Contour:
    r = _region(r)
    pix = np.argwhere(contour_mask(r.mask))
    pts = pix.astype(np.float64) * np.asarray(r.pixel_spacing, dtype=np.float64)
    return Contour(pix, pts)


def _directed(src: Contour, dst: Contour) -> np.ndarray:
    """Distance from every point of ``src`` to the nearest point of ``dst``."""
    d, _ = cKDTree(dst.points_mm).query(src.points_mm, k=1)
    return np.asarray(d, dtype=np.float64)


def _surface_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _region(a), _region(b)
    if a.mask.shape != b.mask.shape:
        raise DimensionError(f"shapes {a.mask.shape} and {b.mask.shape} differ")
    ca, cb = extract_contour(a), extract_contour(b)
    if len(ca) == 0 or len(cb) == 0:
        raise UndefinedMetricError("surface distance undefined for an empty contour")
    return _directed(ca, cb), _directed(cb, ca)


def assd(a, b) -> float:
    dab, dba = _surface_pair(a, b)
    return 0.5 * float(dab.mean()) + 0.5 * float(dba.mean())


def hausdorff(a, b) -> float:
    dab, dba = _surface_pair(a, b)
    return float(max(dab.max(), dba.max()))


def surface_metrics(pred: np.ndarray, truth: np.ndarray, spacing) -> tuple[float, float, bool]:
    """(assd, hausdorff, sentinel) with the empty-structure sentinel policy.

    Both empty counts as perfect agreement. Exactly one empty maps both
    distances to the image diagonal and flags the case.
    """
    a, b = BinaryRegion(pred, spacing), BinaryRegion(truth, spacing)
    ea, eb = not a.mask.any(), not b.mask.any()
    if ea and eb:
        return 0.0, 0.0, False
    if ea or eb:
        diag = a.diagonal_mm
        return diag, diag, True
    dab, dba = _surface_pair(a, b)
    return 0.5 * float(dab.mean()) + 0.5 * float(dba.mean()), float(max(dab.max(), dba.max())), False


def _check_probs_labels(probs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[1:] != labels.shape:
        raise DimensionError(f"probs {probs.shape} incompatible with labels {labels.shape}")
    c = probs.shape[0]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c - 1}]")
    return probs, labels.astype(np.intp)


def nll(probs: np.ndarray, labels: np.ndarray, reduction: str = "mean") -> float:
    """Negative log likelihood of a (C, H, W) probability map; per-pixel mean by default."""
    probs, labels = _check_probs_labels(probs, labels)
    pt = np.take_along_axis(probs, labels[None], axis=0)[0]
    total = float(-np.log(np.maximum(pt, LOG_CLAMP)).sum())
    return total / labels.size if reduction == "mean" else total


def brier(probs: np.ndarray, labels: np.ndarray, reduction: str = "mean") -> float:
    probs, labels = _check_probs_labels(probs, labels)
    onehot = np.arange(probs.shape[0])[:, None, None] == labels[None]
    total = float(((probs - onehot) ** 2).sum())
    return total / labels.size if reduction == "mean" else total


def structure_scores(pred: np.ndarray, truth: np.ndarray, spacing) -> dict[str, dict]:
    """Dice/ASSD/HD for every cardiac structure of two label maps."""
    out = {}
    for name, cls in STRUCTURES.items():
        p, t = pred == cls, truth == cls
        a, h, sentinel = surface_metrics(p, t, spacing)
        out[name] = {"dice": dice(p, t), "assd_mm": a, "hd_mm": h, "sentinel": sentinel}
    return out
