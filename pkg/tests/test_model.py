import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcell import model as mdl
from fedcell.datasets import FederatedDataset, LocalDataset, generate_synthetic
from fedcell.errors import ConfigError, DataFormatError, NumericalError


def _batch(rng, n=12, d=6, classes=10):
    return rng.normal(size=(n, d)), rng.integers(0, classes, size=n)


SPECS = [
    mdl.LossSpec("logistic", n_features=6, l2=1e-2),
    mdl.LossSpec("logistic", n_features=6, l2=0.0, bias=False),
    mdl.LossSpec("mlp", n_features=6, hidden=(7, 5), l2=1e-3),
    mdl.LossSpec("quadratic", n_features=6, l2=0.1),
]


def test_uniform_softmax_loss_at_zero():
    spec = mdl.LossSpec("logistic", n_features=60)
    x, y = _batch(np.random.default_rng(0), d=60)
    assert mdl.loss(spec, np.zeros(spec.n_params), x, y) == pytest.approx(math.log(10), abs=1e-12)


@pytest.mark.parametrize("bias", [True, False])
def test_hand_computed_regularised_loss(bias):
    # w = e1 touches only W[0, 0]; with all-zero features the logits are 0 (bias 0),
    # so cross-entropy is ln 10 and the regulariser adds 0.5 * 0.5 * 1.
    spec = mdl.LossSpec("logistic", n_features=3, l2=0.5, bias=bias)
    w = np.zeros(spec.n_params)
    w[0] = 1.0
    x = np.zeros((1, 3))
    y = np.array([0])
    assert mdl.loss(spec, w, x, y) == pytest.approx(math.log(10) + 0.25, abs=1e-14)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: f"{s.family}-{s.bias}")
def test_gradient_matches_finite_differences(spec):
    rng = np.random.default_rng(1)
    x, y = _batch(rng)
    for _ in range(3):
        w = rng.normal(scale=0.5, size=spec.n_params)
        g = mdl.grad(spec, w, x, y)
        h = 1e-5
        coords = rng.choice(spec.n_params, size=min(20, spec.n_params), replace=False)
        for i in coords:
            e = np.zeros_like(w)
            e[i] = h
            fd = (mdl.loss(spec, w + e, x, y) - mdl.loss(spec, w - e, x, y)) / (2 * h)
            assert abs(fd - g[i]) <= 1e-5 * max(1.0, abs(g[i]))


def test_duplicated_batch_same_gradient():
    spec = SPECS[0]
    rng = np.random.default_rng(2)
    x, y = _batch(rng)
    w = rng.normal(size=spec.n_params)
    g1 = mdl.grad(spec, w, x, y)
    g2 = mdl.grad(spec, w, np.vstack([x, x]), np.concatenate([y, y]))
    assert np.allclose(g1, g2, rtol=1e-13, atol=1e-15)


def test_zero_information_gradient_is_regulariser():
    # zero features, no bias, and all classes equally likely in the batch
    spec = mdl.LossSpec("logistic", n_features=4, l2=0.3, bias=False)
    w = np.random.default_rng(3).normal(size=spec.n_params)
    x = np.zeros((10, 4))
    y = np.arange(10)
    assert np.allclose(mdl.grad(spec, w, x, y), 0.3 * w, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.01, 0.99))
def test_logistic_convexity_and_lower_bound(seed, lam):
    spec = mdl.LossSpec("logistic", n_features=5, l2=0.05)
    rng = np.random.default_rng(seed)
    x, y = _batch(rng, d=5)
    w1, w2 = rng.normal(size=(2, spec.n_params))
    mid = mdl.loss(spec, lam * w1 + (1 - lam) * w2, x, y)
    assert mid <= lam * mdl.loss(spec, w1, x, y) + (1 - lam) * mdl.loss(spec, w2, x, y) + 1e-10
    assert mdl.loss(spec, w1, x, y) >= 0.5 * spec.l2 * w1 @ w1


@pytest.mark.parametrize("spec", SPECS[:3], ids=lambda s: s.family)
def test_permutation_invariance_canonical(spec):
    rng = np.random.default_rng(4)
    x, y = _batch(rng, n=40)
    w = rng.normal(size=spec.n_params)
    perm = rng.permutation(40)
    a = mdl.loss_and_grad(spec, w, x, y, canonical=True)
    b = mdl.loss_and_grad(spec, w, x[perm], y[perm], canonical=True)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_mlp_init_and_mnist_scale_loss(mnist_train):
    spec = mdl.LossSpec("mlp", n_features=784)
    w = mdl.init_params(spec, 0)
    assert w.shape == (784 * 300 + 300 + 300 * 300 + 300 + 300 * 10 + 10,)
    x, y = mnist_train
    idx = np.random.default_rng(0).choice(len(y), 64, replace=False)
    assert 2.0 <= mdl.loss(spec, w, x[idx], y[idx]) <= 2.6


def test_mlp_init_is_glorot_uniform():
    spec = mdl.LossSpec("mlp", n_features=50, hidden=(40,), n_classes=10)
    w = mdl.init_params(spec, 1)
    first = w[: 40 * 50]
    lim = math.sqrt(6 / 90)
    assert np.abs(first).max() <= lim
    assert np.all(w[40 * 50 : 40 * 50 + 40] == 0)
    assert np.all(mdl.init_params(mdl.LossSpec("logistic"), 0) == 0)


def test_errors():
    spec = SPECS[0]
    x, y = _batch(np.random.default_rng(5))
    with pytest.raises(ConfigError):
        mdl.loss(spec, np.zeros(3), x, y)
    with pytest.raises(ConfigError):
        mdl.loss(spec, np.zeros(spec.n_params), x[:, :3], y)
    with pytest.raises(ConfigError):
        mdl.loss(spec, np.zeros(spec.n_params), x[:0], y[:0])
    bad = x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(NumericalError):
        mdl.loss(spec, np.zeros(spec.n_params), bad, y)
    with pytest.raises(ConfigError):
        mdl.LossSpec("cnn")
    with pytest.raises(ConfigError):
        mdl.LossSpec(l2=-1)


def test_clip():
    g = np.array([3.0, 4.0])
    assert np.allclose(mdl.clip(g, 1.0), [0.6, 0.8])
    assert np.array_equal(mdl.clip(g, 10.0), g)
    assert mdl.clip(g, None) is g


def test_hessian_vector_product():
    spec = mdl.LossSpec("logistic", n_features=6, l2=0.2)
    rng = np.random.default_rng(6)
    x, y = _batch(rng)
    w, v = rng.normal(size=(2, spec.n_params))
    h = 1e-6
    fd = (mdl.grad(spec, w + h * v, x, y) - mdl.grad(spec, w - h * v, x, y)) / (2 * h)
    assert np.allclose(mdl.hess_vec(spec, w, x, y, v), fd, atol=1e-7)


# --- smoothness constants --------------------------------------------------


def test_strong_convexity_constants():
    spec = mdl.LossSpec("logistic", l2=1e-4)
    fd = generate_synthetic(10, seed=0)
    mu, L = mdl.strong_convexity_constants(spec, fd)
    assert mu == 1e-4
    assert L >= mu
    assert (mu, L) == mdl.strong_convexity_constants(spec, generate_synthetic(10, seed=0))


def test_smoothness_zero_features():
    spec = mdl.LossSpec("logistic", n_features=3, l2=0.7, bias=False)
    fd = FederatedDataset((LocalDataset(np.zeros((4, 3)), np.arange(4)),))
    assert mdl.strong_convexity_constants(spec, fd) == (0.7, 0.7)


def test_smoothness_bounds_hessian():
    # largest Hessian eigenvalue (power iteration on hess_vec) never exceeds L
    spec = mdl.LossSpec("logistic", n_features=60, l2=1e-3)
    fd = generate_synthetic(5, seed=3)
    _, L = mdl.strong_convexity_constants(spec, fd)
    rng = np.random.default_rng(0)
    for d in fd.locals:
        w = rng.normal(scale=0.1, size=spec.n_params)
        v = rng.normal(size=spec.n_params)
        for _ in range(100):
            v = mdl.hess_vec(spec, w, d.features, d.labels, v)
            v /= np.linalg.norm(v)
        lam = v @ mdl.hess_vec(spec, w, d.features, d.labels, v)
        assert lam <= L


def test_smoothness_rejects_mlp():
    with pytest.raises(ConfigError):
        mdl.strong_convexity_constants(mdl.LossSpec("mlp"), generate_synthetic(2, seed=0))


# --- checkpoints -----------------------------------------------------------


def test_params_roundtrip(tmp_path):
    spec = mdl.LossSpec("mlp", n_features=8, hidden=(6, 4))
    w = mdl.init_params(spec, 2)
    mdl.save_params(spec, w, tmp_path / "w.bin")
    spec2, w2 = mdl.load_params(tmp_path / "w.bin", l2=spec.l2)
    assert spec2 == spec
    assert np.array_equal(w.astype(np.float32), w2)


def test_params_corrupt(tmp_path):
    spec = mdl.LossSpec("logistic", n_features=8)
    p = tmp_path / "w.bin"
    mdl.save_params(spec, np.zeros(spec.n_params), p)
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(DataFormatError):
        mdl.load_params(p)
