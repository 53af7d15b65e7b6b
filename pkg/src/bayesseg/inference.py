"""Posterior and ensemble sampling, and the marginalized prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .unet import Model, forward

SOURCES = ("plain", "bbb", "mcd", "ensemble")
DEFAULT_SAMPLES = {"bbb": 50, "mcd": 50, "plain": 1}


@dataclass(frozen=True)
class SampleStack:
    samples: np.ndarray   # (T, C, H, W) float32
    mean: np.ndarray      # (C, H, W) float64
    source: str

    def __post_init__(self):
        if self.samples.ndim != 4 or self.samples.shape[0] < 1:
            raise DimensionError(f"samples must be (T, C, H, W) with T >= 1, got {self.samples.shape}")
        if self.mean.shape != self.samples.shape[1:]:
            raise DimensionError(f"mean shape {self.mean.shape} != sample shape {self.samples.shape[1:]}")

    @property
    def T(self) -> int:
        return self.samples.shape[0]

    @classmethod
    def from_samples(cls, samples: np.ndarray, source: str) -> "SampleStack":
        samples = np.asarray(samples, dtype=np.float32)
        return cls(samples, samples.astype(np.float64).mean(axis=0), source)


def _members(model_or_members) -> list:
    items = model_or_members if isinstance(model_or_members, (list, tuple)) else [model_or_members]
    out = []
    for item in items:
        if isinstance(item, Model):
            out.append((item, None))
        else:
            out.append((item.model, item.normalizer))
    return out


def _prepare(images: np.ndarray, normalizer) -> np.ndarray:
    return images.astype(np.float32) if normalizer is None else normalizer(images)


def sample_stacks(model_or_members, images: np.ndarray, T: int | None = None, seed: int = 0,
                  batch_size: int = 32) -> list[SampleStack]:
    """Sample stacks for a batch of (H, W) images.

    A single bbb/mcd model gives T stochastic forwards, forward t drawing from
    the stream ``[seed, t]`` (restarted per batch). A list of models is an ensemble: one
    deterministic forward per member, and T must equal the member count.
    """
    members = _members(model_or_members)
    images = np.asarray(images)
    if images.ndim == 2:
        images = images[None]
    if len(members) > 1:
        if T is not None and T != len(members):
            raise ConfigError(f"ensemble of {len(members)} members cannot give T={T} samples")
        source = "ensemble"
        runs = [(m, norm, False, None) for m, norm in members]
    else:
        model, norm = members[0]
        source = model.cfg.variant
        if T is None:
            T = DEFAULT_SAMPLES[source]
        if T < 1:
            raise ConfigError(f"T must be >= 1, got {T}")
        stochastic = source != "plain"
        runs = [(model, norm, stochastic, t) for t in range(T)]
    n = images.shape[0]
    out = None
    for t, (model, norm, stochastic, pos) in enumerate(runs):
        x = _prepare(images, norm)
        parts = []
        for lo in range(0, n, batch_size):
            # every batch restarts the stream, so bbb weight draw t is the same for all images
            rng = np.random.default_rng([seed, pos]) if stochastic else None
            probs, _ = forward(model, x[lo:lo + batch_size], sample=stochastic, rng=rng, need_kl=False)
            parts.append(probs)
        probs = np.concatenate(parts, axis=0)
        if out is None:
            out = np.empty((n, len(runs)) + probs.shape[1:], dtype=np.float32)
        out[:, t] = probs
    return [SampleStack.from_samples(out[i], source) for i in range(n)]


def sample_stack(model_or_members, image: np.ndarray, T: int | None = None,
                 rng: np.random.Generator | int = 0) -> SampleStack:
    seed = int(rng.integers(2 ** 63)) if isinstance(rng, np.random.Generator) else int(rng)
    return sample_stacks(model_or_members, np.asarray(image)[None], T, seed)[0]


def argmax_mask(probs: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the leading class axis; ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=0).astype(np.uint8)
