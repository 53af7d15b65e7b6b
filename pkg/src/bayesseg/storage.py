"""Datasets and checkpoints persisted as tensor archives."""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

import numpy as np

from .archive import TensorArchive
from .errors import ConfigError, SchemaError
from .layers import DropoutConfig, PriorConfig
from .phantom import Dataset
from .preprocess import Normalizer
from .training import TrainedModel
from .unet import ModelConfig, build_unet


def case_name(subject_id: int, slice_index: int) -> str:
    return f"s{int(subject_id):04d}_z{int(slice_index):02d}"


def save_dataset(ds: Dataset, directory: str | os.PathLike, split: str = "all", force: bool = False,
                 **attrs) -> Path:
    """One image and one mask entry per case, with subject/slice/split/spacing attributes."""
    arch = TensorArchive({"split": split, "cases": str(len(ds)),
                          **{k: str(v) for k, v in {**ds.attrs, **attrs}.items()}})
    for i in range(len(ds)):
        name = case_name(ds.subject_ids[i], ds.slice_indices[i])
        meta = {"subject_id": int(ds.subject_ids[i]), "slice_index": int(ds.slice_indices[i]), "split": split,
                "spacing": repr(float(ds.spacing[i]))}
        arch.add(f"image.{name}", ds.images[i], **meta)
        arch.add(f"mask.{name}", ds.masks[i].astype(np.uint8), **meta)
    return arch.save(directory, force=force)


def load_dataset(directory: str | os.PathLike) -> Dataset:
    arch = TensorArchive.load(directory)
    names = [n[len("image."):] for n in arch.names() if n.startswith("image.")]
    if not names:
        raise SchemaError(f"{directory}: archive holds no images")
    images, masks, subjects, slices, spacing = [], [], [], [], []
    for name in names:
        if f"mask.{name}" not in arch:
            raise SchemaError(f"{directory}: image {name} has no mask")
        meta = arch.tensor_attrs[f"image.{name}"]
        try:
            subjects.append(int(meta["subject_id"]))
            slices.append(int(meta["slice_index"]))
            spacing.append(float(meta["spacing"]))
        except KeyError as e:
            raise SchemaError(f"{directory}: image {name} lacks attribute {e}") from None
        images.append(arch[f"image.{name}"])
        masks.append(arch[f"mask.{name}"])
    attrs = {k: v for k, v in arch.attrs.items() if k != "cases"}
    return Dataset(np.stack(images), np.stack(masks), np.array(subjects), np.array(slices),
                   np.array(spacing, dtype=np.float64), attrs)


_MODEL_SCALARS = ("variant", "depth", "base_filters", "num_classes", "in_channels", "rho_init")


def save_checkpoint(trained: TrainedModel, directory: str | os.PathLike, force: bool = False, **attrs) -> Path:
    cfg = trained.model.cfg
    meta = {f"model.{k}": repr(getattr(cfg, k)) if isinstance(getattr(cfg, k), float) else str(getattr(cfg, k))
            for k in _MODEL_SCALARS}
    meta.update({
        "model.input_size": f"{cfg.input_size[0]},{cfg.input_size[1]}",
        "model.mu_prior": repr(float(cfg.prior.mu_prior)),
        "model.sigma_prior": repr(float(cfg.prior.sigma_prior)),
        "model.dropout_rate": repr(float(cfg.dropout.rate)),
        "model.dropout_placement": cfg.dropout.placement,
        "norm.mean": repr(float(trained.normalizer.mean)),
        "norm.variance": repr(float(trained.normalizer.variance)),
        "norm.mode": trained.normalizer.mode,
        "best_epoch": str(trained.best_epoch),
    })
    meta.update({k: str(v) for k, v in attrs.items()})
    arch = TensorArchive(meta)
    for name, arr in trained.model.state_dict().items():
        arch.add(name, arr)
    return arch.save(directory, force=force)


def load_checkpoint(directory: str | os.PathLike) -> TrainedModel:
    arch = TensorArchive.load(directory)
    a = arch.attrs
    try:
        h, w = (int(v) for v in a["model.input_size"].split(","))
        types = {f.name: f.type for f in fields(ModelConfig)}
        scalars = {}
        for k in _MODEL_SCALARS:
            raw = a[f"model.{k}"]
            scalars[k] = raw if k == "variant" else (float(raw) if "float" in str(types[k]) else int(raw))
        cfg = ModelConfig(input_size=(h, w),
                          prior=PriorConfig(float(a["model.mu_prior"]), float(a["model.sigma_prior"])),
                          dropout=DropoutConfig(float(a["model.dropout_rate"]), a["model.dropout_placement"]),
                          **scalars)
        norm = Normalizer(float(a["norm.mean"]), float(a["norm.variance"]), a["norm.mode"])
        best = int(a.get("best_epoch", 0))
    except KeyError as e:
        raise SchemaError(f"{directory}: checkpoint lacks attribute {e}") from None
    model = build_unet(cfg, np.random.default_rng(0))
    model.load_state_dict(dict(arch.tensors))
    return TrainedModel(model, norm, best_epoch=best)


def is_checkpoint(directory: str | os.PathLike) -> bool:
    return (Path(directory) / "manifest.txt").exists()


def load_models(directory: str | os.PathLike) -> TrainedModel | list[TrainedModel]:
    """A checkpoint directory, or a directory of ``member_*`` checkpoints (an ensemble)."""
    directory = Path(directory)
    if is_checkpoint(directory):
        return load_checkpoint(directory)
    members = sorted(p for p in directory.glob("member_*") if is_checkpoint(p))
    if not members:
        raise FileNotFoundError(f"no checkpoint found at {directory}")
    loaded = [load_checkpoint(p) for p in members]
    if len({m.model.cfg.input_size for m in loaded}) != 1:
        raise ConfigError(f"{directory}: ensemble members disagree on input size")
    return loaded
