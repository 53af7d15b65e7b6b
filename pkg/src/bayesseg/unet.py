"""Configurable 2D U-net in plain, Bayes-by-Backprop and MC-dropout variants."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .layers import (
    DropoutConfig,
    GaussianWeightSet,
    PriorConfig,
    bbb_conv_forward,
    dropout_forward,
)
from .tensor import Tensor

VARIANTS = ("plain", "bbb", "mcd")


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "plain"
    depth: int = 4
    base_filters: int = 8
    num_classes: int = 4
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1
    prior: PriorConfig = field(default_factory=PriorConfig)
    dropout: DropoutConfig = field(default_factory=DropoutConfig)
    rho_init: float = -5.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.base_filters < 4:
            raise ConfigError("base_filters must be >= 4")
        h, w = self.input_size
        step = 2 ** (self.depth - 1)
        if h % step or w % step:
            raise ConfigError(f"input size {h}x{w} not divisible by 2^(depth-1) = {step}")

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


@dataclass
class ConvSpec:
    name: str
    cin: int
    cout: int
    ksize: int
    level: int          # resolution level, 0 = full resolution
    role: str           # "enc", "mid", "dec" or "head"
    relu: bool = True


def layer_plan(cfg: ModelConfig) -> list[ConvSpec]:
    """Every convolution of the network in execution order."""
    f = [cfg.base_filters * 2 ** lvl for lvl in range(cfg.depth)]
    plan = []
    cin = cfg.in_channels
    for lvl in range(cfg.depth - 1):
        plan.append(ConvSpec(f"enc{lvl}.conv1", cin, f[lvl], 3, lvl, "enc"))
        plan.append(ConvSpec(f"enc{lvl}.conv2", f[lvl], f[lvl], 3, lvl, "enc"))
        cin = f[lvl]
    b = cfg.depth - 1
    plan.append(ConvSpec("mid.conv1", cin, f[b], 3, b, "mid"))
    plan.append(ConvSpec("mid.conv2", f[b], f[b], 3, b, "mid"))
    for lvl in reversed(range(cfg.depth - 1)):
        plan.append(ConvSpec(f"dec{lvl}.conv1", f[lvl + 1] + f[lvl], f[lvl], 3, lvl, "dec"))
        plan.append(ConvSpec(f"dec{lvl}.conv2", f[lvl], f[lvl], 3, lvl, "dec"))
    plan.append(ConvSpec("head.conv1", f[0], f[0], 1, 0, "head"))
    plan.append(ConvSpec("head.conv2", f[0], cfg.num_classes, 1, 0, "head", relu=False))
    return plan


def dropout_applies(spec: ConvSpec, cfg: ModelConfig) -> bool:
    if not spec.relu:
        return False
    if cfg.dropout.placement == "all_layers":
        return True
    # middle layers: bottleneck plus the encoder/decoder level right above it
    if spec.role == "mid":
        return True
    return spec.role in ("enc", "dec") and spec.level == cfg.depth - 2


class Model:
    def __init__(self, cfg: ModelConfig, layers: dict):
        self.cfg = cfg
        self.plan = layer_plan(cfg)
        self.layers = layers

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for spec in self.plan:
            layer = self.layers[spec.name]
            if self.cfg.variant == "bbb":
                yield f"{spec.name}.kernel.mu", layer["kernel"].mu
                yield f"{spec.name}.kernel.rho", layer["kernel"].rho
                yield f"{spec.name}.bias.mu", layer["bias"].mu
                yield f"{spec.name}.bias.rho", layer["bias"].rho
            else:
                yield f"{spec.name}.kernel", layer["kernel"]
                yield f"{spec.name}.bias", layer["bias"]

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.dtype)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def parameter_count(self) -> int:
        """Number of network weights (for bbb, the number of (mu, rho) pairs)."""
        n = sum(p.data.size for p in self.parameters())
        return n // 2 if self.cfg.variant == "bbb" else n

    def posterior_sigmas(self) -> np.ndarray:
        if self.cfg.variant != "bbb":
            raise ConfigError("posterior sigmas exist only for the bbb variant")
        return np.concatenate([self.layers[s.name][k].sigma.ravel() for s in self.plan for k in ("kernel", "bias")])

    def _conv(self, spec: ConvSpec, x: Tensor, sample: bool, rng, need_kl: bool, kls: list) -> Tensor:
        layer = self.layers[spec.name]
        pad = spec.ksize // 2
        if self.cfg.variant == "bbb":
            y, kl = bbb_conv_forward(x, layer["kernel"], layer["bias"], rng, self.cfg.prior, pad=pad,
                                     sample=sample, need_kl=need_kl)
            if kl is not None:
                kls.append(kl)
        else:
            y = T.conv2d(x, layer["kernel"], layer["bias"], pad=pad)
        if spec.relu:
            y = T.relu(y)
        if self.cfg.variant == "mcd" and dropout_applies(spec, self.cfg):
            y = dropout_forward(y, self.cfg.dropout, training=False, rng=rng, sample=sample)
        return y

    def __call__(self, x: Tensor, sample: bool = False, rng: np.random.Generator | None = None,
                 need_kl: bool = True) -> tuple[Tensor, Tensor | None]:
        """Channels-last forward: x (N, H, W, C_in) -> probabilities (N, H, W, C)."""
        if x.data.ndim != 4 or x.shape[1:3] != tuple(self.cfg.input_size):
            raise DimensionError(f"expected input (N, {self.cfg.input_size[0]}, {self.cfg.input_size[1]}, "
                                 f"{self.cfg.in_channels}), got {x.shape}")
        if x.shape[3] != self.cfg.in_channels:
            raise DimensionError(f"input channel axis {x.shape[3]} != {self.cfg.in_channels}")
        stochastic = sample and self.cfg.variant != "plain"
        if stochastic and rng is None:
            raise ConfigError("sampling forward requires an rng stream")
        kls: list[Tensor] = []
        convs = iter(self.plan)
        skips = []
        h = x
        for _ in range(self.cfg.depth - 1):
            h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
            h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
            skips.append(h)
            h = T.maxpool2(h)
        h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
        h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
        for skip in reversed(skips):
            h = T.concat([T.upsample2(h), skip], axis=-1)
            h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
            h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
        h = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
        logits = self._conv(next(convs), h, stochastic, rng, need_kl, kls)
        probs = T.softmax_channels(logits)
        kl_total = None
        if self.cfg.variant == "bbb" and need_kl:
            kl_total = kls[0]
            for k in kls[1:]:
                kl_total = T.add(kl_total, k)
        return probs, kl_total


def build_unet(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """He-initialized weights drawn from ``rng`` in layer order; biases start at zero."""
    layers = {}
    for spec in layer_plan(cfg):
        fan_in = spec.cin * spec.ksize * spec.ksize
        kernel = rng.standard_normal((spec.ksize, spec.ksize, spec.cin, spec.cout)) * np.sqrt(2.0 / fan_in)
        kernel = kernel.astype(dtype)
        bias = np.zeros(spec.cout, dtype=dtype)
        if cfg.variant == "bbb":
            layers[spec.name] = {
                "kernel": GaussianWeightSet.init(kernel, cfg.rho_init),
                "bias": GaussianWeightSet.init(bias, cfg.rho_init),
            }
        else:
            layers[spec.name] = {
                "kernel": Tensor(kernel, requires_grad=True),
                "bias": Tensor(bias, requires_grad=True),
            }
    return Model(cfg, layers)


def to_channels_last(x: np.ndarray) -> np.ndarray:
    """(N, H, W) or (N, C, H, W) images -> (N, H, W, C)."""
    x = np.asarray(x)
    if x.ndim == 3:
        return x[..., None]
    if x.ndim == 4:
        return np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    raise DimensionError(f"expected 3-D or 4-D image batch, got shape {x.shape}")


def forward(model: Model, x: np.ndarray, sample: bool = False, rng: np.random.Generator | None = None,
            need_kl: bool = True) -> tuple[np.ndarray, float]:
    """Inference entry point: returns probabilities (N, C, H, W) and the total KL (0 unless bbb)."""
    xt = Tensor(to_channels_last(x).astype(np.float32, copy=False))
    probs, kl = model(xt, sample=sample, rng=rng, need_kl=need_kl)
    return np.ascontiguousarray(probs.data.transpose(0, 3, 1, 2)), (kl.item() if kl is not None else 0.0)
