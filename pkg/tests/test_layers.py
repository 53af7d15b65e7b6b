import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesseg import tensor as T
from bayesseg.errors import DimensionError, DomainError
from bayesseg.layers import (DropoutConfig, GaussianWeightSet, PriorConfig, bbb_conv_forward, dropout_forward,
                             kl_factorized_gaussian, sample_weight)
from bayesseg.tensor import Tensor

from .oracles import kl_monte_carlo


def _ws(mu, rho):
    return GaussianWeightSet(Tensor(np.asarray(mu, float), requires_grad=True, dtype=np.float64),
                             Tensor(np.asarray(rho, float), requires_grad=True, dtype=np.float64))


def _rho_for(sigma):
    # inverse softplus
    return math.log(math.expm1(sigma))


class TestSampleWeight:
    def test_zero_eps_gives_mu(self):
        w = _ws([0.3, -1.2], [0.0, 1.0])
        np.testing.assert_array_equal(sample_weight(w, np.zeros(2)).data, [0.3, -1.2])

    def test_collapsed_variance(self):
        w = _ws(np.linspace(-1, 1, 13), np.full(13, -40.0))
        eps = np.linspace(-6, 6, 13)
        np.testing.assert_allclose(sample_weight(w, eps).data, w.mu.data, atol=1e-6)

    def test_softplus_zero(self):
        assert sample_weight(_ws([0.0], [0.0]), np.ones(1)).data.item() == pytest.approx(0.693147, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            sample_weight(_ws([0.0, 1.0], [0.0, 0.0]), np.ones(3))

    def test_analytic_gradients(self):
        rng = np.random.default_rng(4)
        rho = rng.uniform(-4, 2, 6)
        eps = rng.standard_normal(6)
        w = _ws(rng.standard_normal(6), rho)
        T.backward(T.tsum(sample_weight(w, eps)))
        np.testing.assert_allclose(w.mu.grad, 1.0)
        np.testing.assert_allclose(w.rho.grad, eps / (1 + np.exp(-rho)), rtol=1e-12)

    def test_sigma_positive(self):
        assert np.all(_ws(np.zeros(3), [-80.0, 0.0, 50.0]).sigma > 0)


class TestKL:
    def test_identical_to_prior_is_zero(self):
        w = _ws(np.full(5, 0.2), np.full(5, _rho_for(0.7)))
        assert kl_factorized_gaussian(w, PriorConfig(0.2, 0.7)).item() == pytest.approx(0.0, abs=1e-12)

    def test_single_weight_closed_form(self):
        w = _ws([1.0], [_rho_for(1.0)])
        assert kl_factorized_gaussian(w, PriorConfig(0.0, 1.0)).item() == pytest.approx(0.5, abs=1e-12)

    def test_bad_prior(self):
        with pytest.raises(DomainError):
            PriorConfig(0.0, 0.0)

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(11)
        mu, sigma = rng.normal(0, 0.3, 100), rng.uniform(0.05, 0.5, 100)
        w = _ws(mu, [_rho_for(s) for s in sigma])
        est, se = kl_monte_carlo(w.mu.data, w.sigma, 0.0, 0.3, 1_000_000, np.random.default_rng(12))
        assert abs(kl_factorized_gaussian(w, PriorConfig(0.0, 0.3)).item() - est) <= 3 * se

    @settings(max_examples=50, deadline=None)
    @given(mu=st.lists(st.floats(-3, 3), min_size=1, max_size=8), rho=st.floats(-10, 4),
           mp=st.floats(-1, 1), sp=st.floats(0.01, 3))
    def test_nonnegative(self, mu, rho, mp, sp):
        w = _ws(mu, np.full(len(mu), rho))
        assert kl_factorized_gaussian(w, PriorConfig(mp, sp)).item() >= 0

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_zero_only_at_prior(self, seed):
        rng = np.random.default_rng(seed)
        mp, sp = rng.uniform(-1, 1), rng.uniform(0.1, 2)
        delta = rng.uniform(1e-3, 1e-2)
        at = _ws(np.full(4, mp), np.full(4, _rho_for(sp)))
        near = _ws(np.full(4, mp + delta), np.full(4, _rho_for(sp)))
        assert kl_factorized_gaussian(at, PriorConfig(mp, sp)).item() <= 1e-9
        assert kl_factorized_gaussian(near, PriorConfig(mp, sp)).item() > 1e-9

    def test_very_negative_rho_finite(self):
        w = _ws([0.0], [-60.0])
        v = kl_factorized_gaussian(w, PriorConfig(0.0, 0.1)).item()
        assert math.isfinite(v) and v > 0


class TestBBBConv:
    def _setup(self, rho):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 5, 5, 2)), dtype=np.float64)
        k = _ws(rng.standard_normal((3, 3, 2, 3)) * 0.3, np.full((3, 3, 2, 3), rho))
        b = _ws(rng.standard_normal(3) * 0.1, np.full(3, rho))
        return x, k, b

    def test_collapsed_equals_mean_conv(self):
        x, k, b = self._setup(-40.0)
        y, _ = bbb_conv_forward(x, k, b, np.random.default_rng(1), PriorConfig(), pad=1)
        ref = T.conv2d(x, k.mu, b.mu, pad=1)
        np.testing.assert_allclose(y.data, ref.data, atol=1e-5)

    def test_same_stream_same_output(self):
        x, k, b = self._setup(-2.0)
        y1, kl1 = bbb_conv_forward(x, k, b, np.random.default_rng([3, 4]), PriorConfig(), pad=1)
        y2, kl2 = bbb_conv_forward(x, k, b, np.random.default_rng([3, 4]), PriorConfig(), pad=1)
        assert np.array_equal(y1.data, y2.data) and kl1.item() == kl2.item()

    def test_kl_is_layer_sum(self):
        x, k, b = self._setup(-2.0)
        prior = PriorConfig(0.0, 0.1)
        _, kl = bbb_conv_forward(x, k, b, np.random.default_rng(0), prior)
        expected = kl_factorized_gaussian(k, prior).item() + kl_factorized_gaussian(b, prior).item()
        assert kl.item() == pytest.approx(expected, rel=1e-12)

    def test_mean_over_draws_matches_mean_conv(self):
        # conv is linear in the kernel, so E[y] is the conv with the posterior means
        x, k, b = self._setup(-1.0)
        rng = np.random.default_rng(9)
        draws = np.stack([bbb_conv_forward(x, k, b, rng, PriorConfig(), pad=1, need_kl=False)[0].data
                          for _ in range(10_000)])
        ref = T.conv2d(x, k.mu, b.mu, pad=1).data
        se = draws.std(axis=0) / math.sqrt(len(draws))
        assert np.mean(np.abs(draws.mean(axis=0) - ref) <= 3 * se) > 0.98

    def test_one_draw_shared_across_batch(self):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((1, 5, 5, 2))
        x = Tensor(np.concatenate([img, img]), dtype=np.float64)
        _, k, b = self._setup(0.0)
        y, _ = bbb_conv_forward(x, k, b, np.random.default_rng(5), PriorConfig(), pad=1)
        np.testing.assert_array_equal(y.data[0], y.data[1])


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.ones((1, 3, 3, 2)))
        assert dropout_forward(x, DropoutConfig(0.0), True, np.random.default_rng(0)) is x

    def test_identity_mode_bit_exact(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 4, 4, 3)).astype(np.float32))
        out = dropout_forward(x, DropoutConfig(0.5), training=False, rng=None, sample=False)
        assert np.array_equal(out.data, x.data)

    def test_rate_one_rejected(self):
        with pytest.raises(DomainError):
            DropoutConfig(1.0)

    def test_unbiased_and_zero_fraction(self):
        x = Tensor(np.full((1, 100, 100, 10), 2.0), dtype=np.float64)
        out = dropout_forward(x, DropoutConfig(0.5), training=False, rng=np.random.default_rng(3), sample=True).data
        n = out.size
        se = out.std() / math.sqrt(n)
        assert abs(out.mean() - 2.0) <= 3 * se
        zero_frac = float((out == 0).mean())
        assert abs(zero_frac - 0.5) <= 3 * math.sqrt(0.25 / n)
        assert set(np.unique(out).tolist()) == {0.0, 4.0}

    def test_bad_placement(self):
        with pytest.raises(Exception):
            DropoutConfig(0.1, "first_layer")
