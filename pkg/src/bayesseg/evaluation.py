"""Per-image evaluation rows: accuracy, calibration and uncertainty for every structure."""

from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .errors import SchemaError
from .inference import argmax_mask, sample_stacks
from .metrics import STRUCTURES, brier, nll, structure_scores
from .phantom import Dataset
from .storage import case_name
from .uncertainty import uncertainty_record

EVAL_COLUMNS = ("image_id", "subject_id", "slice_index", "structure", "dice", "assd_mm", "hd_mm", "sentinel",
                "nll", "brier", "entropy", "mutual_information", "dice_ws", "assd_ws")


def evaluate(models, ds: Dataset, T: int | None = None, seed: int = 0, batch_size: int = 32,
             chunk: int = 16) -> list[dict]:
    """One row per image and structure, images processed ``chunk`` at a time to bound memory.

    Chunk c samples from the seed stream ``[seed, c]``, so results depend only on
    ``seed`` and ``chunk``.
    """
    rows = []
    for c, lo in enumerate(range(0, len(ds), chunk)):
        idx = np.arange(lo, min(lo + chunk, len(ds)))
        sub_seed = int(np.random.default_rng([seed, c]).integers(2 ** 31))
        stacks = sample_stacks(models, ds.images[idx], T, sub_seed, batch_size)
        for i, st in zip(idx, stacks):
            rows.extend(image_rows(st, ds.masks[i], float(ds.spacing[i]), int(ds.subject_ids[i]),
                                   int(ds.slice_indices[i])))
    return rows


def image_rows(stack, truth: np.ndarray, spacing: float, subject_id: int, slice_index: int) -> list[dict]:
    image_id = case_name(subject_id, slice_index)
    sp = (spacing, spacing)
    pred = argmax_mask(stack.mean)
    scores = structure_scores(pred, truth, sp)
    unc = uncertainty_record(stack, image_id, sp)
    shared = {"nll": nll(stack.mean, truth), "brier": brier(stack.mean, truth), "entropy": unc.entropy,
              "mutual_information": unc.mutual_information}
    rows = []
    for name in STRUCTURES:
        rows.append({"image_id": image_id, "subject_id": subject_id, "slice_index": slice_index, "structure": name,
                     **scores[name], **shared, "dice_ws": unc.dice_ws[name], "assd_ws": unc.assd_ws[name]})
    return rows


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_rows(rows: list[dict], path: str | os.PathLike, columns=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def read_rows(path: str | os.PathLike, required=()) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"CSV not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: missing columns {', '.join(missing)}")
        return list(reader)


def summarize(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and median of the accuracy and uncertainty columns per structure."""
    out = {}
    for name in STRUCTURES:
        sel = [r for r in rows if r["structure"] == name]
        stats = {}
        for col in ("dice", "assd_mm", "hd_mm", "nll", "brier", "entropy", "mutual_information", "dice_ws",
                    "assd_ws"):
            vals = np.array([float(r[col]) for r in sel])
            stats[f"{col}_mean"] = float(vals.mean()) if len(vals) else float("nan")
            stats[f"{col}_median"] = float(np.median(vals)) if len(vals) else float("nan")
        out[name] = stats
    return out
