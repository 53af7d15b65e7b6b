"""Gradient-check cases: every differentiable operator plus the BBB and dropout layers.

Each case builds float64 leaves from a seed and a closure that rebuilds the
graph from them, so the finite-difference oracle can perturb leaf data in place.
"""

from __future__ import annotations

import numpy as np

from bayesseg import tensor as T
from bayesseg.layers import DropoutConfig, GaussianWeightSet, PriorConfig, bbb_conv_forward, dropout_forward
from bayesseg.layers import kl_factorized_gaussian, sample_weight
from bayesseg.tensor import Tensor
from bayesseg.unet import ModelConfig, build_unet

from .oracles import numeric_grad, rel_error


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, shape, lo=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, 1.0, size=shape)


def _project(out: Tensor, rng_seed: int) -> Tensor:
    r = np.random.default_rng([rng_seed, 99]).standard_normal(out.shape)
    return T.tsum(T.mul(out, r))


def case_elementwise(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng.uniform(0.2, 1.5, (3, 4))), _leaf(rng.standard_normal((3, 4)))
    c = rng.standard_normal((3, 4))

    def loss(a, b):
        y = T.add(T.mul(a, b), T.sub(T.square(b), T.neg(T.exp(T.mul(a, 0.5)))))
        y = T.add(y, T.mul(T.log(a), c))
        y = T.add(T.softplus(y), T.mul(b, 2.0))
        y = T.sub(T.add(y, 1.5), 0.25)
        return T.add(_project(y, seed), T.tmean(T.square(a)))

    return loss, [a, b]


def case_relu(seed):
    rng = np.random.default_rng(seed)
    a = _leaf(_away_from_zero(rng, (2, 3, 4)))
    return (lambda a: _project(T.relu(a), seed)), [a]


def case_concat(seed):
    rng = np.random.default_rng(seed)
    a, b = _leaf(rng.standard_normal((1, 2, 2, 3))), _leaf(rng.standard_normal((1, 2, 2, 2)))
    return (lambda a, b: _project(T.concat([a, b], axis=-1), seed)), [a, b]


def case_conv(seed):
    rng = np.random.default_rng(seed)
    stride, pad = [(1, 1), (1, 0), (2, 1), (2, 0)][seed % 4]
    x = _leaf(rng.standard_normal((2, 5, 5, 2)))
    k = _leaf(rng.standard_normal((3, 3, 2, 3)) * 0.5)
    b = _leaf(rng.standard_normal(3))
    return (lambda x, k, b: _project(T.conv2d(x, k, b, stride=stride, pad=pad), seed)), [x, k, b]


def case_pool_upsample(seed):
    rng = np.random.default_rng(seed)
    # distinct values per pooling window keep the argmax away from ties
    x = _leaf(rng.permutation(2 * 4 * 4 * 2).reshape(2, 4, 4, 2) / 10.0 + rng.uniform(0, 0.01, (2, 4, 4, 2)))

    def loss(x):
        return _project(T.upsample2(T.maxpool2(x)), seed)

    return loss, [x]


def case_softmax_ce(seed):
    rng = np.random.default_rng(seed)
    z = _leaf(rng.standard_normal((2, 3, 3, 4)) * 2)
    labels = rng.integers(0, 4, (2, 3, 3))
    return (lambda z: T.add(T.cross_entropy(T.softmax_channels(z), labels),
                            _project(T.softmax_channels(z), seed))), [z]


def case_three_layer_net(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.standard_normal((2, 4, 4, 1)))
    k1, b1 = _leaf(rng.standard_normal((3, 3, 1, 3)) * 0.6), _leaf(rng.standard_normal(3) * 0.1)
    k2, b2 = _leaf(rng.standard_normal((3, 3, 3, 3)) * 0.4), _leaf(rng.standard_normal(3) * 0.1)
    k3, b3 = _leaf(rng.standard_normal((1, 1, 6, 4)) * 0.5), _leaf(rng.standard_normal(4) * 0.1)
    labels = rng.integers(0, 4, (2, 4, 4))

    def loss(x, k1, b1, k2, b2, k3, b3):
        h1 = T.relu(T.conv2d(x, k1, b1, pad=1))
        h2 = T.relu(T.conv2d(T.maxpool2(h1), k2, b2, pad=1))
        h = T.concat([T.upsample2(h2), h1], axis=-1)
        return T.cross_entropy(T.softmax_channels(T.conv2d(h, k3, b3)), labels)

    return loss, [x, k1, b1, k2, b2, k3, b3]


def case_kl(seed):
    rng = np.random.default_rng(seed)
    mu, rho = _leaf(rng.standard_normal(7) * 0.3), _leaf(rng.uniform(-4, 1, 7))
    prior = PriorConfig(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(0.1, 1.0)))
    return (lambda mu, rho: kl_factorized_gaussian(GaussianWeightSet(mu, rho), prior)), [mu, rho]


def case_sample_weight(seed):
    rng = np.random.default_rng(seed)
    mu, rho = _leaf(rng.standard_normal((2, 3))), _leaf(rng.uniform(-3, 1, (2, 3)))
    eps = rng.standard_normal((2, 3))
    return (lambda mu, rho: _project(sample_weight(GaussianWeightSet(mu, rho), eps), seed)), [mu, rho]


def case_bbb_conv(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.standard_normal((2, 4, 4, 2)))
    kmu, krho = _leaf(rng.standard_normal((3, 3, 2, 2)) * 0.4), _leaf(rng.uniform(-4, -1, (3, 3, 2, 2)))
    bmu, brho = _leaf(rng.standard_normal(2) * 0.1), _leaf(rng.uniform(-4, -1, 2))
    prior = PriorConfig(0.0, 0.5)

    def loss(x, kmu, krho, bmu, brho):
        y, kl = bbb_conv_forward(x, GaussianWeightSet(kmu, krho), GaussianWeightSet(bmu, brho),
                                 np.random.default_rng([seed, 5]), prior, pad=1)
        return T.add(_project(y, seed), T.mul(kl, 0.01))

    return loss, [x, kmu, krho, bmu, brho]


def case_dropout(seed):
    rng = np.random.default_rng(seed)
    x = _leaf(rng.standard_normal((1, 3, 3, 4)))
    cfg = DropoutConfig(0.3)
    return (lambda x: _project(dropout_forward(x, cfg, training=True, rng=np.random.default_rng([seed, 6])),
                               seed)), [x]


def case_unet(seed):
    """A tiny full network of each variant, including the KL path for bbb."""
    variant = ("plain", "bbb", "mcd")[seed % 3]
    cfg = ModelConfig(variant=variant, depth=2, base_filters=4, input_size=(4, 4), rho_init=-3.0)
    model = build_unet(cfg, np.random.default_rng(seed), dtype=np.float64)
    params = model.parameters()
    rng = np.random.default_rng([seed, 1])
    x = Tensor(rng.standard_normal((2, 4, 4, 1)), dtype=np.float64)
    labels = rng.integers(0, 4, (2, 4, 4))
    names = [n for n, _ in model.named_parameters()]
    # shift biases off zero so ReLUs do not sit on their kink
    for n, p in zip(names, params):
        if n.endswith("bias") or n.endswith("bias.mu"):
            p.data[:] = rng.uniform(0.05, 0.2, p.shape)

    def loss(*_):
        probs, kl = model(x, sample=True, rng=np.random.default_rng([seed, 2]))
        ce = T.cross_entropy(probs, labels)
        return ce if kl is None else T.add(ce, T.mul(kl, 1e-3))

    return loss, params


CASES = {
    "elementwise": case_elementwise,
    "relu": case_relu,
    "concat": case_concat,
    "conv2d": case_conv,
    "maxpool_upsample": case_pool_upsample,
    "softmax_cross_entropy": case_softmax_ce,
    "three_layer_net": case_three_layer_net,
    "kl_gaussian": case_kl,
    "sample_weight": case_sample_weight,
    "bbb_conv": case_bbb_conv,
    "dropout": case_dropout,
    "unet": case_unet,
}


def check_case(name: str, seed: int, h: float = 1e-6, max_entries: int = 24) -> float:
    """Worst relative error between backward() and central differences over all leaves.

    Leaves larger than ``max_entries`` are checked on a random subset of entries.
    """
    loss_fn, leaves = CASES[name](seed)
    analytic = T.backward(loss_fn(*leaves), leaves)
    pick = np.random.default_rng([seed, 7])
    worst = 0.0
    for leaf, g in zip(leaves, analytic):
        idx = None
        if leaf.data.size > max_entries:
            idx = np.sort(pick.choice(leaf.data.size, max_entries, replace=False))
        num = numeric_grad(lambda: loss_fn(*leaves).item(), leaf.data, h, idx)
        if idx is not None:
            g, num = g.reshape(-1)[idx], num.reshape(-1)[idx]
        worst = max(worst, rel_error(g, num))
    return worst
