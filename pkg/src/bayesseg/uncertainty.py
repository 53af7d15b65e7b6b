"""Pixelwise and structural predictive-uncertainty measures over a sample stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inference import SampleStack, argmax_mask
from .metrics import STRUCTURES, dice, surface_metrics


@dataclass
class UncertaintyRecord:
    image_id: str
    entropy: float
    mutual_information: float
    dice_ws: dict = field(default_factory=dict)
    assd_ws: dict = field(default_factory=dict)


def _entropy_map(p: np.ndarray) -> np.ndarray:
    """Per-pixel entropy of a (..., C, H, W) map with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -(p * np.log(safe)).sum(axis=-3)


def predictive_entropy(mean_probs: np.ndarray) -> float:
    return float(_entropy_map(mean_probs).mean())


def mutual_information(stack: SampleStack) -> float:
    """H(mean) minus the average per-sample entropy, averaged over pixels."""
    # identical samples carry no disagreement; skip the rounding residue of H(mean) - mean H
    if stack.T < 2 or np.all(stack.samples == stack.samples[0]):
        return 0.0
    h_mean = _entropy_map(stack.mean)
    h_samples = _entropy_map(stack.samples).mean(axis=0)
    return max(float((h_mean - h_samples).mean()), 0.0)


def _masks(stack: SampleStack) -> tuple[np.ndarray, np.ndarray]:
    return argmax_mask(stack.mean), stack.samples.argmax(axis=1)


def dice_within_samples(stack: SampleStack, class_id: int) -> float:
    mean_mask, sample_masks = _masks(stack)
    ref = mean_mask == class_id
    return float(np.mean([dice(ref, s == class_id) for s in sample_masks]))


def assd_within_samples(stack: SampleStack, class_id: int, spacing=(1.0, 1.0)) -> float:
    """Mean ASSD between the mean segmentation and each sample segmentation.

    Both-empty pairs count 0; one-empty pairs count the image diagonal.
    """
    mean_mask, sample_masks = _masks(stack)
    ref = mean_mask == class_id
    vals = [surface_metrics(ref, s == class_id, spacing)[0] for s in sample_masks]
    return float(np.mean(vals))


def _agreement(ref: np.ndarray, other: np.ndarray, spacing) -> tuple[float, float]:
    if np.array_equal(ref, other):
        return 1.0, 0.0
    return dice(ref, other), surface_metrics(ref, other, spacing)[0]


def uncertainty_record(stack: SampleStack, image_id: str, spacing=(1.0, 1.0)) -> UncertaintyRecord:
    rec = UncertaintyRecord(image_id, predictive_entropy(stack.mean), mutual_information(stack))
    mean_mask, sample_masks = _masks(stack)
    for name, cls in STRUCTURES.items():
        ref = mean_mask == cls
        pairs = np.array([_agreement(ref, s == cls, spacing) for s in sample_masks])
        rec.dice_ws[name] = float(pairs[:, 0].mean())
        rec.assd_ws[name] = float(pairs[:, 1].mean())
    return rec
