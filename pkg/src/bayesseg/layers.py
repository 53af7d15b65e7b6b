"""Bayes-by-Backprop convolutions, MC dropout and the Gaussian KL penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Tensor

PLACEMENTS = ("all_layers", "middle_layers")


@dataclass(frozen=True)
class PriorConfig:
    mu_prior: float = 0.0
    sigma_prior: float = 0.1

    def __post_init__(self):
        if not self.sigma_prior > 0:
            raise DomainError(f"sigma_prior must be positive, got {self.sigma_prior}")


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.1
    placement: str = "middle_layers"

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise DomainError(f"dropout rate must lie in [0, 1), got {self.rate}")
        if self.placement not in PLACEMENTS:
            raise DomainError(f"dropout placement must be one of {PLACEMENTS}, got {self.placement!r}")


class GaussianWeightSet:
    """Fully factorized Gaussian over one parameter array, sigma = softplus(rho)."""

    def __init__(self, mu: Tensor, rho: Tensor):
        if mu.shape != rho.shape:
            raise DimensionError(f"mu shape {mu.shape} != rho shape {rho.shape}")
        self.mu = mu
        self.rho = rho

    @property
    def shape(self):
        return self.mu.shape

    @property
    def sigma(self) -> np.ndarray:
        return T.softplus_array(self.rho.data)

    @classmethod
    def init(cls, mu: np.ndarray, rho_init: float) -> "GaussianWeightSet":
        mu = np.asarray(mu)
        return cls(Tensor(mu, requires_grad=True), Tensor(np.full_like(mu, rho_init), requires_grad=True))


def sample_weight(w: GaussianWeightSet, eps) -> Tensor:
    """Reparameterized draw ``mu + softplus(rho) * eps``."""
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps)
    if eps.shape != w.shape:
        raise DimensionError(f"eps shape {eps.shape} != weight shape {w.shape}")
    return T.add(w.mu, T.mul(T.softplus(w.rho), eps))


def kl_factorized_gaussian(w: GaussianWeightSet, prior: PriorConfig) -> Tensor:
    """Closed-form KL[q || p] summed over all weights, accumulated in float64."""
    sp = float(prior.sigma_prior)
    if not sp > 0:
        raise DomainError(f"sigma_prior must be positive, got {sp}")
    mp = float(prior.mu_prior)
    mu = w.mu.data.astype(np.float64)
    rho = w.rho.data.astype(np.float64)
    sigma = T.softplus_array(rho)
    # log(softplus(rho)) stays finite for very negative rho since softplus(rho) ~ exp(rho)
    log_sigma = np.where(rho < -30.0, rho, np.log(np.maximum(sigma, np.finfo(np.float64).tiny)))
    terms = np.log(sp) - log_sigma + (sigma ** 2 + (mu - mp) ** 2) / (2 * sp ** 2) - 0.5
    value = np.asarray(max(terms.sum(), 0.0))

    def bw(g):
        g = float(g)
        d_mu = (mu - mp) / sp ** 2
        d_sigma = -1.0 / sigma + sigma / sp ** 2
        d_rho = d_sigma * T.sigmoid_array(rho)
        return (g * d_mu).astype(w.mu.dtype), (g * d_rho).astype(w.rho.dtype)

    return T._make(value, (w.mu, w.rho), bw, "kl_gaussian")


def bbb_conv_forward(x: Tensor, kernel: GaussianWeightSet, bias: GaussianWeightSet, rng: np.random.Generator,
                     prior: PriorConfig, pad: int = 0, stride: int = 1, sample: bool = True,
                     need_kl: bool = True) -> tuple[Tensor, Tensor | None]:
    """One weight draw per call, shared across the minibatch.

    With ``sample=False`` the posterior means are used.
    """
    if sample:
        k = sample_weight(kernel, rng.standard_normal(kernel.shape, dtype=np.float32).astype(kernel.mu.dtype))
        b = sample_weight(bias, rng.standard_normal(bias.shape, dtype=np.float32).astype(bias.mu.dtype))
    else:
        k, b = kernel.mu, bias.mu
    y = T.conv2d(x, k, b, stride=stride, pad=pad)
    kl = None
    if need_kl:
        kl = T.add(kl_factorized_gaussian(kernel, prior), kl_factorized_gaussian(bias, prior))
    return y, kl


def dropout_forward(x: Tensor, cfg: DropoutConfig, training: bool, rng: np.random.Generator | None,
                    sample: bool = False) -> Tensor:
    """Inverted dropout, active while training or when a posterior sample is requested."""
    rate = cfg.rate
    if not 0 <= rate < 1:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0 or not (training or sample):
        return x
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    return T.mul(x, keep * x.dtype.type(1.0 / (1.0 - rate)))
