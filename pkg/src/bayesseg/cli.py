"""Command-line pipeline: gen-data, train, distort, eval, qc, report.

Exit codes: 0 success, 1 usage or configuration problem, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .distortions import DistortionSpec, distort_batch
from .errors import BayesSegError, ConfigError, SchemaError
from .evaluation import EVAL_COLUMNS, evaluate, read_rows, summarize, write_rows
from .phantom import generate_dataset, split_dataset
from .qc import qc_report
from .storage import load_dataset, load_models, save_checkpoint, save_dataset
from .svg import line_chart
from .training import fit, train_ensemble

HISTORY_COLUMNS = ("epoch", "train_ce", "train_kl", "val_nll", "val_dice_lv", "val_dice_myo", "val_dice_rv")
SPLITS = ("train", "val", "test")


class UsageError(Exception):
    """Refusals and bad arguments (exit code 1)."""


def _refuse_existing(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"{path} already exists (use --force to overwrite)")


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = Path(args.out) / "data"
    for split in SPLITS:
        _refuse_existing(root / split, args.force)
    ds = generate_dataset(cfg.data)
    parts = split_dataset(ds, cfg.data.split)
    for split in SPLITS:
        save_dataset(parts[split], root / split, split=split, force=True)
        print(f"{split}: {len(parts[split])} cases from {len(np.unique(parts[split].subject_ids))} subjects")
    print(f"total: {len(ds)} cases")
    return 0


def _require_dataset(path: Path) -> Path:
    if not (path / "manifest.txt").exists():
        raise FileNotFoundError(f"dataset archive not found: {path}")
    return path


def _write_history(history: list[dict], path: Path) -> None:
    rows = [{c: r.get(c, float("nan")) for c in HISTORY_COLUMNS} for r in history]
    write_rows(rows, path, HISTORY_COLUMNS)


def cmd_train(args) -> int:
    cfg = _config(args)
    variant = args.variant or cfg.model.variant
    data = Path(args.data) if args.data else Path(args.out) / "data"
    train_set = load_dataset(_require_dataset(data / "train"))
    val_set = load_dataset(_require_dataset(data / "val"))
    name = args.name or variant
    target = Path(args.out) / "models" / name
    _refuse_existing(target, args.force)
    if variant == "ensemble":
        seeds = cfg.ensemble_seeds()
        members = train_ensemble(cfg.model_config(), train_set, val_set, cfg.train, seeds,
                                 jobs=cfg.ensemble.jobs)
        for m, (seed, trained) in enumerate(zip(seeds, members)):
            out = target / f"member_{m:02d}"
            save_checkpoint(trained, out, force=True, seed=seed)
            _write_history(trained.history, out / "history.csv")
            print(f"member {m}: seed {seed}, best epoch {trained.best_epoch}")
    else:
        model_cfg = replace(cfg.model_config(), variant=variant)
        trained = fit(model_cfg, train_set, val_set, cfg.train, log_every=args.log_every)
        save_checkpoint(trained, target, force=True, seed=cfg.train.seed)
        _write_history(trained.history, target / "history.csv")
        print(f"{name}: best epoch {trained.best_epoch}, val_nll {trained.history[trained.best_epoch - 1]['val_nll']:.5f}")
    return 0


def cmd_distort(args) -> int:
    cfg = _config(args)
    spec = DistortionSpec(args.kind or cfg.distort.kind,
                          cfg.distort.degree if args.degree is None else args.degree)
    src = Path(args.data) if args.data else Path(args.out) / "data" / "test"
    ds = load_dataset(_require_dataset(src))
    target = Path(args.out) / "data" / f"{src.name}_{spec.kind}{spec.degree}"
    _refuse_existing(target, args.force)
    images, masks = distort_batch(ds.images, ds.masks, spec, cfg.eval.seed)
    out = ds.with_images(images, masks)
    save_dataset(out, target, split=ds.attrs.get("split", src.name), force=True, distortion=spec.kind,
                 degree=spec.degree, parameter=repr(spec.parameter))
    print(f"{target}: {len(out)} cases, {spec.kind} degree {spec.degree} (parameter {spec.parameter:g})")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    model_dir = Path(args.model)
    if not model_dir.exists():
        raise FileNotFoundError(f"model not found: {model_dir}")
    models = load_models(model_dir)
    data = _require_dataset(Path(args.data) if args.data else Path(args.out) / "data" / "test")
    ds = load_dataset(data)
    first = models[0] if isinstance(models, list) else models
    if tuple(ds.images.shape[1:]) != tuple(first.model.cfg.input_size):
        raise ConfigError(f"images {ds.images.shape[1:]} do not match model input {first.model.cfg.input_size}")
    T = args.T if args.T is not None else (cfg.eval.T or None)
    if isinstance(models, list):
        T = None
    target = Path(args.csv) if args.csv else Path(args.out) / "eval" / f"{model_dir.name}__{data.name}.csv"
    if target.exists() and not args.force:
        raise UsageError(f"{target} already exists (use --force to overwrite)")
    rows = evaluate(models, ds, T, cfg.eval.seed, cfg.eval.batch_size)
    write_rows(rows, target, EVAL_COLUMNS)
    for structure, s in summarize(rows).items():
        print(f"{structure}: dice {s['dice_mean']:.4f}, assd median {s['assd_mm_median']:.3f} mm, "
              f"assd_ws median {s['assd_ws_median']:.3f} mm")
    print(f"wrote {len(rows)} rows to {target}")
    return 0


def cmd_qc(args) -> int:
    cfg = _config(args)
    measure = args.measure or cfg.qc.measure
    rows = []
    for path in args.eval:
        rows.extend(read_rows(path, required=("structure", "assd_mm", "assd_ws", measure)))
    label = args.label or Path(args.eval[0]).stem
    target = Path(args.out) / "qc" / label
    _refuse_existing(target, args.force)
    curve_rows, summary_rows, curves = qc_report(rows, cfg.qc.thresholds, measure, cfg.qc.target)
    write_rows(curve_rows, target / "curves.csv", ("method", "structure", "flagged_fraction", "remaining_fraction"))
    write_rows(summary_rows, target / "summary.csv")
    for structure in ("lv", "myo", "rv"):
        series = {m: (list(c.flagged), list(c.remaining)) for (m, s), c in curves.items() if s == structure}
        if series:
            line_chart(series, target / f"{structure}.svg", title=f"QC {structure}",
                       xlabel="fraction flagged", ylabel="fraction poor remaining")
    for r in summary_rows:
        print(f"{r['structure']:>3} {r['method']:<14} auc {r['auc']:.4f}")
    return 0


def cmd_report(args) -> int:
    target = Path(args.out) / "report"
    _refuse_existing(target, args.force)
    target.mkdir(parents=True, exist_ok=True)
    summary = []
    for path in args.eval or []:
        rows = read_rows(path, required=EVAL_COLUMNS)
        for structure, stats in summarize(rows).items():
            summary.append({"source": Path(path).stem, "structure": structure, **stats})
    if summary:
        write_rows(summary, target / "eval_summary.csv")
    for path in args.history or []:
        rows = read_rows(path, required=HISTORY_COLUMNS)
        epochs = [float(r["epoch"]) for r in rows]
        stem = Path(path).parent.name or Path(path).stem
        line_chart({"train_ce": (epochs, [float(r["train_ce"]) for r in rows]),
                    "val_nll": (epochs, [float(r["val_nll"]) for r in rows])},
                   target / f"{stem}_loss.svg", title=stem, xlabel="epoch", ylabel="loss")
        line_chart({s: (epochs, [float(r[f"val_dice_{s}"]) for r in rows]) for s in ("lv", "myo", "rv")},
                   target / f"{stem}_dice.svg", title=stem, xlabel="epoch", ylabel="validation Dice")
    print(f"report written to {target}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="run config file (key = value lines)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output root directory")
    common.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite outputs")

    p = argparse.ArgumentParser(prog="bayesseg", parents=[common],
                                description="Bayesian U-net segmentation with uncertainty-based QC")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate phantom train/val/test archives")

    t = sub.add_parser("train", parents=[common], help="train a model or an ensemble")
    t.add_argument("--variant", choices=("plain", "bbb", "mcd", "ensemble"))
    t.add_argument("--data", help="directory holding train/ and val/ archives (default OUT/data)")
    t.add_argument("--name", help="model directory name under OUT/models (default: the variant)")
    t.add_argument("--log-every", type=int, default=1)

    d = sub.add_parser("distort", parents=[common], help="write a distorted copy of a dataset")
    d.add_argument("--data", help="source archive (default OUT/data/test)")
    d.add_argument("--kind", choices=("noise", "blur", "stretch"))
    d.add_argument("--degree", type=int)

    e = sub.add_parser("eval", parents=[common], help="per-image metrics and uncertainty CSV")
    e.add_argument("--model", required=True, help="checkpoint directory or ensemble directory")
    e.add_argument("--data", help="dataset archive (default OUT/data/test)")
    e.add_argument("--T", type=int, help="posterior samples (default: config, then variant default)")
    e.add_argument("--csv", help="output CSV path (default OUT/eval/MODEL__DATA.csv)")

    q = sub.add_parser("qc", parents=[common], help="QC curves from one or more eval CSVs (pooled)")
    q.add_argument("--eval", nargs="+", required=True)
    q.add_argument("--measure", choices=("assd_ws", "dice_ws", "entropy", "mutual_information"))
    q.add_argument("--label", help="output directory name under OUT/qc")

    r = sub.add_parser("report", parents=[common], help="summary table and training-curve charts")
    r.add_argument("--eval", nargs="*")
    r.add_argument("--history", nargs="*")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "distort": cmd_distort, "eval": cmd_eval,
            "qc": cmd_qc, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    for name, default in (("config", None), ("seed", None), ("out", "runs"), ("force", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (BayesSegError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
