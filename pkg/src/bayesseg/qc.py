"""Segmentation quality control by uncertainty-ranked manual review.

A QC curve sweeps a review threshold from "review nothing" to "review
everything": after flagging the k most uncertain cases out of N, it records
(k/N, poor cases left unflagged / N). Lower area under the curve is better.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class QcThresholds:
    lv_mm: float = 1.17
    myo_mm: float = 1.19
    rv_mm: float = 1.88

    def __post_init__(self):
        if not (self.lv_mm > 0 and self.myo_mm > 0 and self.rv_mm > 0):
            raise DomainError("QC thresholds must be positive")

    def for_structure(self, structure: str) -> float:
        try:
            return {"lv": self.lv_mm, "myo": self.myo_mm, "rv": self.rv_mm}[structure]
        except KeyError:
            raise DomainError(f"unknown structure {structure!r}") from None


@dataclass(frozen=True)
class QcCurve:
    points: np.ndarray   # (K, 2): flagged fraction, remaining poor fraction
    auc: float

    @property
    def flagged(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def remaining(self) -> np.ndarray:
        return self.points[:, 1]


def classify_poor(assd_mm: float, structure: str, thresholds: QcThresholds = QcThresholds(),
                  sentinel: bool = False) -> bool:
    """Poor when the ASSD strictly exceeds the structure's inter-observer value."""
    limit = thresholds.for_structure(structure)
    if sentinel:
        return True
    if assd_mm < 0:
        raise DomainError(f"ASSD must be >= 0, got {assd_mm}")
    return bool(assd_mm > limit)


def trapezoid_auc(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def curve_from_order(order: np.ndarray, poor: np.ndarray) -> QcCurve:
    poor = np.asarray(poor, dtype=bool)
    n = len(poor)
    if n < 1:
        raise DimensionError("QC curve needs at least one case")
    flagged_poor = np.concatenate([[0], np.cumsum(poor[order])])
    k = np.arange(n + 1)
    points = np.column_stack([k / n, (poor.sum() - flagged_poor) / n])
    return QcCurve(points, trapezoid_auc(points))


def review_order(scores) -> np.ndarray:
    """Indices by descending score, ties kept in input order."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def qc_curve(uncertainty, poor) -> QcCurve:
    if len(uncertainty) != len(poor):
        raise DimensionError(f"{len(uncertainty)} uncertainty values for {len(poor)} cases")
    return curve_from_order(review_order(uncertainty), poor)


def random_baseline(P: int, N: int) -> QcCurve:
    """Expected curve of reviewing cases in random order."""
    if not 0 <= P <= N or N < 1:
        raise DomainError(f"need 0 <= P <= N and N >= 1, got P={P}, N={N}")
    f = np.arange(N + 1) / N
    points = np.column_stack([f, (P / N) * (1.0 - f)])
    return QcCurve(points, P / (2.0 * N))


def slice_position_scores(subject_ids, slice_indices) -> np.ndarray:
    """Distance of each slice from its subject's middle slice."""
    if subject_ids is None or slice_indices is None:
        raise ConfigError("slice-position baseline needs subject and slice metadata")
    subject_ids = np.asarray(subject_ids)
    slice_indices = np.asarray(slice_indices, dtype=np.float64)
    if len(subject_ids) != len(slice_indices) or np.isnan(slice_indices).any():
        raise ConfigError("slice metadata missing for some cases")
    dist = np.empty_like(slice_indices)
    for s in np.unique(subject_ids):
        sel = subject_ids == s
        mid = (slice_indices[sel].min() + slice_indices[sel].max()) / 2.0
        dist[sel] = np.abs(slice_indices[sel] - mid)
    return dist


def slice_position_baseline(subject_ids, slice_indices, poor) -> QcCurve:
    """Review the most basal and apical slices first, then move inwards."""
    scores = slice_position_scores(subject_ids, slice_indices)
    if len(scores) != len(poor):
        raise DimensionError("slice metadata and poor labels differ in length")
    return qc_curve(scores, poor)


def review_fraction_for_target(curve: QcCurve, target: float) -> float:
    """Smallest flagged fraction at which the remaining poor fraction drops to ``target``."""
    if target < 0:
        raise DomainError(f"target must be >= 0, got {target}")
    f, r = curve.flagged, curve.remaining
    hits = np.flatnonzero(r <= target + 1e-15)
    k = int(hits[0])
    if k == 0:
        return 0.0
    f0, f1, r0, r1 = f[k - 1], f[k], r[k - 1], r[k]
    return float(f0 + (r0 - target) / (r0 - r1) * (f1 - f0))


def spearman(u, a) -> float:
    """Pearson correlation of average ranks."""
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if u.shape != a.shape or u.ndim != 1:
        raise DimensionError("spearman needs two equal-length 1-D sequences")
    if len(u) < 2:
        raise DimensionError("spearman needs at least two observations")
    if np.all(u == u[0]) or np.all(a == a[0]):
        raise DomainError("spearman correlation undefined for a constant input")
    ru, ra = rankdata(u) - (len(u) + 1) / 2.0, rankdata(a) - (len(a) + 1) / 2.0
    return float(np.clip((ru * ra).sum() / np.sqrt((ru * ru).sum() * (ra * ra).sum()), -1.0, 1.0))


METHODS = ("uncertainty", "random", "slice_position")
# measures where a larger value means more confidence
_CONFIDENCE_MEASURES = ("dice_ws",)


def _flag(v) -> bool:
    return str(v).strip().lower() in ("1", "true")


def qc_report(rows: list[dict], thresholds: QcThresholds = QcThresholds(), measure: str = "assd_ws",
              target: float = 0.05) -> tuple[list[dict], list[dict], dict]:
    """Per-structure QC curves for uncertainty ranking and both baselines.

    ``rows`` are per-image evaluation rows (one per image and structure). Returns
    (curve rows, summary rows, {(method, structure): QcCurve}).
    """
    curves = {}
    for structure in ("lv", "myo", "rv"):
        sel = [r for r in rows if r["structure"] == structure]
        if not sel:
            continue
        poor = [classify_poor(float(r["assd_mm"]), structure, thresholds, _flag(r.get("sentinel", 0)))
                for r in sel]
        scores = np.array([float(r[measure]) for r in sel])
        if measure in _CONFIDENCE_MEASURES:
            scores = -scores
        subjects = [r.get("subject_id") for r in sel]
        slices = [r.get("slice_index") for r in sel]
        if any(s is None or s == "" for s in subjects + slices):
            raise ConfigError("slice-position baseline needs subject_id and slice_index for every row")
        curves[("uncertainty", structure)] = qc_curve(scores, poor)
        curves[("random", structure)] = random_baseline(int(sum(poor)), len(poor))
        curves[("slice_position", structure)] = slice_position_baseline(
            [int(s) for s in subjects], [int(s) for s in slices], poor)
    curve_rows, summary_rows = [], []
    for (method, structure), c in curves.items():
        for f, r in c.points:
            curve_rows.append({"method": method, "structure": structure, "flagged_fraction": float(f),
                               "remaining_fraction": float(r)})
        n = len(c.points) - 1
        summary_rows.append({"method": method, "structure": structure, "n": n,
                             "poor": int(round(c.points[0, 1] * n)), "auc": c.auc,
                             f"review_fraction_at_{target * 100:g}pct": review_fraction_for_target(c, target)})
    return curve_rows, summary_rows, curves
