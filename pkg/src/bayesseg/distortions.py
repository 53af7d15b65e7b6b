"""Out-of-distribution image corruptions: Rician noise, Gaussian blur, local stretch.

Severity degrees 1-4 interpolate linearly between the parameter endpoints;
degree 0 is the undistorted image.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DomainError

KINDS = ("noise", "blur", "stretch")
PARAMETER_RANGES = {
    "noise": (0.05, 0.10),   # Rician sigma, intensities in [0, 1]
    "blur": (1.0, 4.0),      # Gaussian sigma in pixels
    "stretch": (1.1, 1.6),   # magnification at the structure centroid
}
IDENTITY = {"noise": 0.0, "blur": 0.0, "stretch": 1.0}


class DistortionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    degree: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DomainError(f"distortion kind must be one of {KINDS}, got {self.kind!r}")
        if not 0 <= self.degree <= 4:
            raise DomainError(f"distortion degree must lie in 0..4, got {self.degree}")

    @property
    def parameter(self) -> float:
        if self.degree == 0:
            return IDENTITY[self.kind]
        lo, hi = PARAMETER_RANGES[self.kind]
        return lo + (hi - lo) * (self.degree - 1) / 3.0


def rician_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"noise sigma must be >= 0, got {sigma}")
    x = np.asarray(image, dtype=np.float64)
    if sigma == 0:
        return np.asarray(image).copy()
    e1 = rng.standard_normal(x.shape)
    e2 = rng.standard_normal(x.shape)
    out = np.sqrt((x + sigma * e1) ** 2 + (sigma * e2) ** 2)
    return np.clip(out, 0.0, 2.0).astype(np.asarray(image).dtype)


def gaussian_blur(image: np.ndarray, sigma_px: float) -> np.ndarray:
    """Separable Gaussian truncated at 3 sigma, normalized kernel, reflective borders."""
    if sigma_px < 0:
        raise DomainError(f"blur sigma must be >= 0, got {sigma_px}")
    image = np.asarray(image)
    if sigma_px == 0:
        return image.copy()
    out = ndimage.gaussian_filter(image.astype(np.float64), sigma_px, mode="reflect", truncate=3.0)
    return out.astype(image.dtype)


def stretch(image: np.ndarray, mask: np.ndarray, factor: float) -> tuple[np.ndarray, np.ndarray]:
    """Radial magnification about the foreground centroid.

    Magnification is ``factor`` at the centroid and falls off with a raised
    cosine to 1 at twice the structure radius (the largest centroid-to-foreground
    distance). Pixels beyond that radius are copied unchanged.
    """
    if factor < 1:
        raise DomainError(f"stretch factor must be >= 1, got {factor}")
    image, mask = np.asarray(image), np.asarray(mask)
    fg = np.argwhere(mask > 0)
    if len(fg) == 0:
        warnings.warn("stretch: empty foreground, image left unchanged", DistortionWarning, stacklevel=2)
        return image.copy(), mask.copy()
    if factor == 1:
        return image.copy(), mask.copy()
    c = fg.mean(axis=0)
    radius = float(np.sqrt(((fg - c) ** 2).sum(axis=1)).max()) + 0.5
    falloff = 2.0 * radius
    rr, cc = np.mgrid[0:image.shape[0], 0:image.shape[1]].astype(np.float64)
    dy, dx = rr - c[0], cc - c[1]
    r = np.sqrt(dy * dy + dx * dx)
    inside = r < falloff
    mag = np.ones_like(r)
    mag[inside] = 1.0 + (factor - 1.0) * 0.5 * (1.0 + np.cos(np.pi * r[inside] / falloff))
    coords = np.stack([c[0] + dy / mag, c[1] + dx / mag])
    img = ndimage.map_coordinates(image.astype(np.float64), coords, order=1, mode="nearest")
    msk = ndimage.map_coordinates(mask, coords, order=0, mode="nearest")
    out_img = np.where(inside, img, image).astype(image.dtype)
    out_msk = np.where(inside, msk, mask).astype(mask.dtype)
    return out_img, out_msk


def distort(image: np.ndarray, mask: np.ndarray, spec: DistortionSpec,
            rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``spec``; noise and blur leave the mask untouched."""
    p = spec.parameter
    if spec.kind == "noise":
        return rician_noise(image, p, rng), np.asarray(mask).copy()
    if spec.kind == "blur":
        return gaussian_blur(image, p), np.asarray(mask).copy()
    return stretch(image, mask, p)


def distort_batch(images: np.ndarray, masks: np.ndarray, spec: DistortionSpec,
                  seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Distort every image; image i draws from the stream ``[seed, i]``."""
    out_i, out_m = [], []
    for i, (img, m) in enumerate(zip(images, masks)):
        a, b = distort(img, m, spec, np.random.default_rng([seed, i]))
        out_i.append(a)
        out_m.append(b)
    return np.stack(out_i), np.stack(out_m)
