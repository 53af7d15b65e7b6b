import numpy as np
import pytest

from bayesseg.errors import ConfigError
from bayesseg.inference import sample_stack, sample_stacks
from bayesseg.layers import DropoutConfig
from bayesseg.preprocess import Normalizer
from bayesseg.training import TrainedModel
from bayesseg.uncertainty import uncertainty_record
from bayesseg.unet import ModelConfig, build_unet, forward


def _model(variant, seed=0, **kw):
    cfg = ModelConfig(variant=variant, depth=2, base_filters=4, input_size=(16, 16), **kw)
    return build_unet(cfg, np.random.default_rng(seed))


def _images(n=3, seed=0):
    return np.random.default_rng(seed).random((n, 16, 16)).astype(np.float32)


def test_plain_samples_identical():
    model = _model("plain")
    img = _images(1)[0]
    st = sample_stack(model, img, T=5)
    assert st.T == 5 and st.source == "plain"
    for t in range(5):
        assert np.array_equal(st.samples[t], st.samples[0])
    np.testing.assert_allclose(st.mean, forward(model, img[None, None])[0][0], atol=1e-7)


def test_mcd_rate_zero_identical():
    st = sample_stack(_model("mcd", dropout=DropoutConfig(0.0)), _images(1)[0], T=4)
    assert all(np.array_equal(s, st.samples[0]) for s in st.samples)


def test_bbb_reproducible_and_varied():
    model = _model("bbb", rho_init=-2.0)
    img = _images(1)[0]
    a = sample_stack(model, img, T=50, rng=11)
    b = sample_stack(model, img, T=50, rng=11)
    assert np.array_equal(a.mean, b.mean)
    assert not np.array_equal(a.samples[0], a.samples[1])


def test_default_T():
    assert sample_stack(_model("bbb"), _images(1)[0]).T == 50
    assert sample_stack(_model("mcd"), _images(1)[0]).T == 50
    assert sample_stack(_model("plain"), _images(1)[0]).T == 1


def test_stack_invariants():
    for st in sample_stacks(_model("mcd", dropout=DropoutConfig(0.5)), _images(4), T=6, seed=3):
        np.testing.assert_allclose(st.samples.sum(axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(st.mean.sum(axis=0), 1.0, atol=1e-6)
        np.testing.assert_allclose(st.mean, st.samples.astype(np.float64).mean(axis=0), atol=1e-12)


def test_batching_does_not_change_samples():
    model = _model("bbb", rho_init=-2.0)
    imgs = _images(5)
    a = sample_stacks(model, imgs, T=3, seed=2, batch_size=2)
    b = sample_stacks(model, imgs, T=3, seed=2, batch_size=5)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.samples, y.samples, atol=1e-6)


def test_ensemble_members():
    members = [_model("plain", seed=s) for s in range(3)]
    img = _images(1)[0]
    st = sample_stack(members, img)
    assert st.T == 3 and st.source == "ensemble"
    for m, s in zip(members, st.samples):
        np.testing.assert_allclose(s, forward(m, img[None, None])[0][0], atol=1e-7)
    with pytest.raises(ConfigError):
        sample_stack(members, img, T=5)


def test_normalizer_applied():
    model = _model("plain")
    norm = Normalizer(0.5, 0.04)
    img = _images(1)[0]
    st = sample_stack(TrainedModel(model, norm), img)
    np.testing.assert_allclose(st.mean, forward(model, norm(img)[None, None])[0][0], atol=1e-7)


def test_bad_T():
    with pytest.raises(ConfigError):
        sample_stack(_model("bbb"), _images(1)[0], T=0)


def test_collapsed_bbb_uncertainty_vanishes():
    st = sample_stack(_model("bbb", rho_init=-40.0), _images(1)[0], T=8)
    rec = uncertainty_record(st, "img")
    assert rec.mutual_information == pytest.approx(0.0, abs=1e-6)
    assert all(v == 1.0 for v in rec.dice_ws.values())
    assert all(v == 0.0 for v in rec.assd_ws.values())
