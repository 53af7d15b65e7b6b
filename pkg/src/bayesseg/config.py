"""Run configuration: a UTF-8 file of ``section.key = value`` lines.

Sections map onto the library's config dataclasses::

    data.subjects = 120          PhantomConfig
    model.variant = bbb          ModelConfig (plus prior_* / dropout_* keys)
    train.lam = 10               TrainConfig (plus members, jobs)
    eval.T = 50                  EvalConfig
    distort.kind = noise         DistortionSpec
    qc.lv_mm = 1.17              QcSettings

Blank lines and ``#`` comments are ignored. Tuples are comma separated,
booleans are ``true``/``false``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .distortions import DistortionSpec
from .errors import BayesSegError, ConfigError
from .phantom import PhantomConfig
from .qc import QcThresholds
from .training import TrainConfig
from .unet import ModelConfig

QC_MEASURES = ("assd_ws", "dice_ws", "entropy", "mutual_information")


@dataclass(frozen=True)
class EvalConfig:
    T: int = 0              # 0 means the variant default (50 for bbb/mcd, 1 for plain)
    seed: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.T < 0 or self.batch_size < 1:
            raise ConfigError("eval.T must be >= 0 and eval.batch_size >= 1")


@dataclass(frozen=True)
class EnsembleConfig:
    members: int = 10
    jobs: int = 1

    def __post_init__(self):
        if self.members < 1 or self.jobs < 1:
            raise ConfigError("train.members and train.jobs must be >= 1")


@dataclass(frozen=True)
class QcSettings:
    thresholds: QcThresholds = field(default_factory=QcThresholds)
    measure: str = "assd_ws"
    target: float = 0.05

    def __post_init__(self):
        if self.measure not in QC_MEASURES:
            raise ConfigError(f"qc.measure must be one of {QC_MEASURES}, got {self.measure!r}")
        if self.target < 0:
            raise ConfigError("qc.target must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    data: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    distort: DistortionSpec = field(default_factory=lambda: DistortionSpec("noise", 0))
    qc: QcSettings = field(default_factory=QcSettings)

    def model_config(self) -> ModelConfig:
        n = self.data.image_size
        return replace(self.model, input_size=(n, n))

    def with_seed(self, seed: int) -> "RunConfig":
        """Override every seed (data, training, evaluation) at once."""
        return replace(self, data=replace(self.data, seed=seed), train=replace(self.train, seed=seed),
                       eval=replace(self.eval, seed=seed))

    def ensemble_seeds(self) -> list[int]:
        return [self.train.seed + m for m in range(self.ensemble.members)]


# key -> (dataclass attribute path, field name)
def _keymap() -> dict[str, tuple[tuple[str, ...], str]]:
    keys = {}
    for f in dataclasses.fields(PhantomConfig):
        keys[f"data.{f.name}"] = (("data",), f.name)
    for f in dataclasses.fields(ModelConfig):
        # input size follows data.image_size; channel and class counts are fixed by the phantoms
        if f.name not in ("prior", "dropout", "input_size", "in_channels", "num_classes"):
            keys[f"model.{f.name}"] = (("model",), f.name)
    keys["model.mu_prior"] = (("model", "prior"), "mu_prior")
    keys["model.sigma_prior"] = (("model", "prior"), "sigma_prior")
    keys["model.dropout_rate"] = (("model", "dropout"), "rate")
    keys["model.dropout_placement"] = (("model", "dropout"), "placement")
    for f in dataclasses.fields(TrainConfig):
        keys[f"train.{f.name}"] = (("train",), f.name)
    keys["train.members"] = (("ensemble",), "members")
    keys["train.jobs"] = (("ensemble",), "jobs")
    for f in dataclasses.fields(EvalConfig):
        keys[f"eval.{f.name}"] = (("eval",), f.name)
    keys["distort.kind"] = (("distort",), "kind")
    keys["distort.degree"] = (("distort",), "degree")
    for name in ("lv_mm", "myo_mm", "rv_mm"):
        keys[f"qc.{name}"] = (("qc", "thresholds"), name)
    keys["qc.measure"] = (("qc",), "measure")
    keys["qc.target"] = (("qc",), "target")
    return keys


KEYS = _keymap()


def _coerce(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(like, tuple):
            parts = [p.strip() for p in text.split(",")]
            if len(parts) != len(like):
                raise ValueError(f"expected {len(like)} values")
            return tuple(type(x)(p) for x, p in zip(like, parts))
        if isinstance(like, float):
            return float(text)
        if isinstance(like, int):
            return int(text)
        return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} ({e})") from None


def _get(obj, path):
    for p in path:
        obj = getattr(obj, p)
    return obj


def _set(obj, path, name, value):
    if not path:
        return replace(obj, **{name: value})
    child = getattr(obj, path[0])
    return replace(obj, **{path[0]: _set(child, path[1:], name, value)})


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply every ``key = value`` line to ``base`` (defaults when omitted)."""
    pending: dict[str, str] = {}
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        if key not in KEYS:
            raise ConfigError(f"line {line_no}: unknown key {key!r}")
        if key in pending:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        pending[key] = value
    return apply_overrides(base or default_config(), pending)


def apply_overrides(cfg: RunConfig, values: dict[str, str]) -> RunConfig:
    """Rebuild ``cfg`` with string overrides; dataclass validation runs on every rebuild."""
    # group per dataclass so cross-field checks see the final values together
    groups: dict[tuple[str, ...], dict] = {}
    for key, text in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}")
        path, name = KEYS[key]
        current = getattr(_get(cfg, path), name)
        groups.setdefault(path, {})[name] = _coerce(text, current, key)
    try:
        for path in sorted(groups, key=len, reverse=True):
            target = replace(_get(cfg, path), **groups[path])
            cfg = _set(cfg, path[:-1], path[-1], target)
    except BayesSegError as e:
        raise ConfigError(str(e)) from None
    return cfg


def default_config() -> RunConfig:
    return RunConfig()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return default_config()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"))


def dump_config(cfg: RunConfig) -> str:
    """Serialize to the same ``key = value`` format (round-trips through parse_config)."""
    lines = []
    for key, (path, name) in KEYS.items():
        value = getattr(_get(cfg, path), name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
