"""Synthetic short-axis cardiac phantoms with LV / myocardium / RV label maps.

Each subject gets its own random stream, so generation is reproducible per
subject and independent of how many subjects are requested.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .errors import ConfigError

BACKGROUND, LV, MYO, RV = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 64
    subjects: int = 120
    slices_per_subject: int = 5
    seed: int = 0
    spacing_mm: float = 1.8
    lv_radius_mm: tuple[float, float] = (11.0, 16.0)
    myo_thickness_mm: tuple[float, float] = (4.5, 7.0)
    rv_width: tuple[float, float] = (0.6, 0.9)      # RV depth as a fraction of the epicardial radius
    rv_span: tuple[float, float] = (1.1, 1.45)      # RV lateral extent as a fraction of the epicardial radius
    center_jitter_px: float = 4.0
    blood_level: tuple[float, float] = (0.75, 0.92)
    myo_level: tuple[float, float] = (0.15, 0.28)
    tissue_level: tuple[float, float] = (0.38, 0.52)
    texture_amplitude: float = 0.06
    noise_sigma: float = 0.02
    extreme_size: float = 0.6       # structure scale on the first and last slice
    extreme_contrast: float = 0.55  # structure contrast on the first and last slice
    contrast_shift: float = 0.0
    split: tuple[int, int, int] = (80, 10, 30)

    def __post_init__(self):
        if self.subjects < 1:
            raise ConfigError(f"subjects must be >= 1, got {self.subjects}")
        if self.slices_per_subject < 3:
            raise ConfigError("slices_per_subject must be >= 3")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")
        if not self.spacing_mm > 0:
            raise ConfigError("spacing must be positive")
        for name in ("lv_radius_mm", "myo_thickness_mm", "rv_width", "rv_span", "blood_level", "myo_level",
                     "tissue_level"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigError(f"{name} range ({lo}, {hi}) is not ordered and nonnegative")
        if not -0.5 <= self.contrast_shift <= 1.0:
            raise ConfigError(f"contrast_shift must lie in [-0.5, 1.0], got {self.contrast_shift}")
        if not (0 < self.extreme_size <= 1 and 0 < self.extreme_contrast <= 1):
            raise ConfigError("extreme_size and extreme_contrast must lie in (0, 1]")
        # largest heart (epicardium plus RV) has to fit inside the frame
        spacing = self.effective_spacing
        r_epi = (self.lv_radius_mm[1] + self.myo_thickness_mm[1]) / spacing
        reach = r_epi * max(1 + self.rv_width[1], np.hypot(1.0, self.rv_span[1])) + self.center_jitter_px + 2
        if reach > self.image_size / 2:
            raise ConfigError(f"geometry ranges reach {reach:.1f} px, beyond half the image ({self.image_size / 2})")

    @property
    def effective_spacing(self) -> float:
        # shifted domains use finer pixels, so the same anatomy covers more of them
        return self.spacing_mm * (1.0 - 0.25 * self.contrast_shift)


@dataclass(frozen=True)
class PhantomCase:
    image: np.ndarray
    mask: np.ndarray
    subject_id: int
    slice_index: int
    pixel_spacing: tuple[float, float]


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W) float32 in [0, 1]
    masks: np.ndarray           # (N, H, W) uint8
    subject_ids: np.ndarray     # (N,) int
    slice_indices: np.ndarray   # (N,) int
    spacing: np.ndarray         # (N,) float, isotropic in-plane mm
    attrs: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.masks[idx], self.subject_ids[idx], self.slice_indices[idx],
                       self.spacing[idx], dict(self.attrs))

    def with_images(self, images: np.ndarray, masks: np.ndarray | None = None, **attrs) -> "Dataset":
        return Dataset(np.asarray(images, dtype=np.float32), self.masks if masks is None else masks,
                       self.subject_ids, self.slice_indices, self.spacing, {**self.attrs, **attrs})

    def cases(self) -> list[PhantomCase]:
        return [PhantomCase(self.images[i], self.masks[i], int(self.subject_ids[i]), int(self.slice_indices[i]),
                            (float(self.spacing[i]), float(self.spacing[i]))) for i in range(len(self))]

    @classmethod
    def from_cases(cls, cases: list[PhantomCase]) -> "Dataset":
        return cls(np.stack([c.image for c in cases]).astype(np.float32),
                   np.stack([c.mask for c in cases]).astype(np.uint8),
                   np.array([c.subject_id for c in cases]), np.array([c.slice_index for c in cases]),
                   np.array([c.pixel_spacing[0] for c in cases], dtype=np.float64))


def _slice_profile(k: int, n: int, extreme: float) -> float:
    """1 at the middle slice, ``extreme`` at the first and last, quadratic in between."""
    mid = (n - 1) / 2.0
    d = abs(k - mid) / mid
    return 1.0 - (1.0 - extreme) * d * d


def _ellipse_radius(rr, cc, cy, cx, a, b, angle):
    """Normalized elliptical radius (1 on the boundary)."""
    dy, dx = rr - cy, cc - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


def _subject(cfg: PhantomConfig, subject_id: int) -> list[PhantomCase]:
    rng = np.random.default_rng([cfg.seed, subject_id])
    n = cfg.image_size
    spacing = cfg.effective_spacing
    rr, cc = np.mgrid[0:n, 0:n].astype(np.float64)
    center = np.array([(n - 1) / 2.0, (n - 1) / 2.0]) + rng.uniform(-cfg.center_jitter_px, cfg.center_jitter_px, 2)
    r_lv = rng.uniform(*cfg.lv_radius_mm) / spacing
    thick = rng.uniform(*cfg.myo_thickness_mm) / spacing
    ecc = rng.uniform(0.0, 0.12)
    tilt = rng.uniform(0, np.pi)
    rv_dir = np.pi + rng.uniform(-0.6, 0.6)
    rv_w = rng.uniform(*cfg.rv_width)
    rv_s = rng.uniform(*cfg.rv_span)
    blood = rng.uniform(*cfg.blood_level)
    rv_blood = blood * rng.uniform(0.9, 1.0)
    myo = rng.uniform(*cfg.myo_level)
    tissue = rng.uniform(*cfg.tissue_level)
    body_a, body_b = rng.uniform(0.40, 0.47, 2) * n
    body_angle = rng.uniform(0, np.pi)
    # bright distractor (aorta / liver-like) placed away from the heart
    dis_angle = rv_dir + np.pi + rng.uniform(-0.8, 0.8)
    dis_r = rng.uniform(2.0, 4.0)
    dis_level = rng.uniform(0.6, 0.85)

    cases = []
    for k in range(cfg.slices_per_subject):
        size = _slice_profile(k, cfg.slices_per_subject, cfg.extreme_size)
        contrast = _slice_profile(k, cfg.slices_per_subject, cfg.extreme_contrast)
        a_lv, b_lv = r_lv * size * (1 + ecc), r_lv * size * (1 - ecc)
        t = thick * (0.85 + 0.15 * size)
        a_epi, b_epi = a_lv + t, b_lv + t
        endo = _ellipse_radius(rr, cc, center[0], center[1], a_lv, b_lv, tilt)
        epi = _ellipse_radius(rr, cc, center[0], center[1], a_epi, b_epi, tilt)
        r_epi = 0.5 * (a_epi + b_epi)
        rv_center = center + r_epi * np.array([np.sin(rv_dir), np.cos(rv_dir)])
        rv = _ellipse_radius(rr, cc, rv_center[0], rv_center[1], r_epi * rv_w, r_epi * rv_s, rv_dir)

        mask = np.zeros((n, n), dtype=np.uint8)
        mask[rv <= 1.0] = RV
        mask[epi <= 1.0] = MYO
        mask[endo <= 1.0] = LV

        body = _ellipse_radius(rr, cc, (n - 1) / 2.0, (n - 1) / 2.0, body_a, body_b, body_angle) <= 1.0
        texture = ndimage.gaussian_filter(rng.standard_normal((n, n)), 3.0)
        texture *= cfg.texture_amplitude / (texture.std() + 1e-12)
        img = np.where(body, tissue + texture, 0.04)
        dis_center = center + (r_epi + dis_r + 6.0) * np.array([np.sin(dis_angle), np.cos(dis_angle)])
        distractor = _ellipse_radius(rr, cc, dis_center[0], dis_center[1], dis_r, dis_r * 1.3, rv_dir) <= 1.0
        img = np.where(distractor & (mask == BACKGROUND), tissue + contrast * (dis_level - tissue), img)
        levels = {LV: blood, MYO: myo, RV: rv_blood}
        for cls, level in levels.items():
            img = np.where(mask == cls, tissue + contrast * (level - tissue), img)
        img = ndimage.gaussian_filter(img, 0.6)
        img = img + cfg.noise_sigma * rng.standard_normal((n, n))
        img = np.clip(img, 0.0, 1.0)
        if cfg.contrast_shift:
            img = img ** (1.0 + cfg.contrast_shift)
        cases.append(PhantomCase(img.astype(np.float32), mask, subject_id, k, (spacing, spacing)))
    return cases


def generate_phantom(cfg: PhantomConfig, subject_offset: int = 0) -> list[PhantomCase]:
    cases = []
    for s in range(subject_offset, subject_offset + cfg.subjects):
        cases.extend(_subject(cfg, s))
    return cases


def shifted_phantom(cfg: PhantomConfig, subject_offset: int = 0) -> Dataset:
    """Same anatomy family under a shifted intensity mapping and pixel spacing."""
    return Dataset.from_cases(generate_phantom(cfg, subject_offset))


def generate_dataset(cfg: PhantomConfig) -> Dataset:
    return Dataset.from_cases(generate_phantom(cfg))


def split_dataset(ds: Dataset, split: tuple[int, int, int]) -> dict[str, Dataset]:
    """Disjoint train/val/test subsets by subject id, in subject order."""
    subjects = np.unique(ds.subject_ids)
    n_train, n_val, n_test = split
    if n_train + n_val + n_test > len(subjects):
        raise ConfigError(f"split {split} needs more than {len(subjects)} subjects")
    groups = {
        "train": subjects[:n_train],
        "val": subjects[n_train:n_train + n_val],
        "test": subjects[n_train + n_val:n_train + n_val + n_test],
    }
    return {name: ds.subset(np.flatnonzero(np.isin(ds.subject_ids, ids))) for name, ids in groups.items()}


def check_topology(mask: np.ndarray) -> list[str]:
    """Violated phantom invariants (empty list when the mask is valid)."""
    problems = []
    mask = np.asarray(mask)
    if not set(np.unique(mask).tolist()) <= {0, 1, 2, 3}:
        problems.append("classes outside {0,1,2,3}")
    padded = np.pad(mask, 1, constant_values=BACKGROUND)
    core = padded[1:-1, 1:-1]
    neighbours = [padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]]
    lv = core == LV
    if not lv.any():
        problems.append("LV missing")
    for nb in neighbours:
        if np.any(lv & ~np.isin(nb, (LV, MYO))):
            problems.append("LV not enclosed by myocardium")
            break
    rv = core == RV
    if not rv.any():
        problems.append("RV missing")
    elif not any(np.any(rv & (nb == MYO)) for nb in neighbours):
        problems.append("RV not adjacent to myocardium")
    return problems
