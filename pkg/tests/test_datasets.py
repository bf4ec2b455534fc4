import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from fedcell import datasets as ds
from fedcell.errors import ConfigError, DataFormatError


# --- power-law sizes -------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), floor=st.integers(1, 100), extra=st.integers(0, 5000), seed=st.integers(0, 2**32 - 1))
def test_power_law_sizes_sum_and_floor(n, floor, extra, seed):
    total = n * floor + extra
    sizes = ds.power_law_sizes(n, total, floor, np.random.default_rng(seed))
    assert sizes.sum() == total
    assert sizes.min() >= floor


def test_power_law_sizes_infeasible():
    with pytest.raises(ConfigError):
        ds.power_law_sizes(10, 99, 10, np.random.default_rng(0))


# --- synthetic -------------------------------------------------------------


def test_synthetic_shapes_and_weights():
    fd = ds.generate_synthetic(30, seed=1)
    assert fd.n_devices == 30
    assert fd.n_features == 60
    assert abs(fd.p.sum() - 1) <= 1e-12
    assert np.all(fd.p > 0)
    assert fd.test_set is not None
    assert len(np.unique(fd.sizes)) > 1


def test_synthetic_heterogeneity_exceeds_iid_baseline():
    het = ds.label_heterogeneity(ds.generate_synthetic(100, 1.0, 1.0, seed=3))
    base = ds.label_heterogeneity(ds.generate_synthetic(100, 0.0, 0.0, seed=3))
    assert het > base


def test_synthetic_zero_alpha_models_share_distribution():
    models = ds.device_models(40, 0.0, 0.0, np.random.default_rng(5))
    coef = [np.concatenate([m.w.ravel(), m.b]) for m in models]
    assert stats.ks_2samp(coef[0], coef[1]).pvalue > 1e-3
    assert stats.kstest(np.concatenate(coef), "norm").pvalue > 1e-3


def test_synthetic_alpha_shifts_device_means():
    models = ds.device_models(200, 1.0, 0.0, np.random.default_rng(6))
    means = np.array([np.concatenate([m.w.ravel(), m.b]).mean() for m in models])
    # per-device mean ~ N(0, 1) plus a small within-device term
    assert 0.7 < means.var() < 1.4


def test_synthetic_feature_variance_profile():
    fd = ds.generate_synthetic(3, seed=2, total_samples=3 * 2000, min_samples=1000, test_fraction=0.0)
    j = np.arange(1, 61)
    for d in fd.locals:
        var = d.features.var(axis=0, ddof=1)
        assert np.all(np.abs(var / j**-1.2 - 1) < 0.2)


def test_synthetic_deterministic():
    a = ds.generate_synthetic(10, seed=9)
    b = ds.generate_synthetic(10, seed=9)
    for x, y in zip(a.locals, b.locals):
        assert x.features.tobytes() == y.features.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_synthetic_invalid_args():
    with pytest.raises(ConfigError):
        ds.generate_synthetic(0)
    with pytest.raises(ConfigError):
        ds.generate_synthetic(5, alpha_tilde=-1)


# --- IDX parsing -----------------------------------------------------------


def _write_idx(tmp_path, images: np.ndarray, labels: np.ndarray):
    ip = tmp_path / "img"
    lp = tmp_path / "lab"
    ip.write_bytes(struct.pack(">IIII", 0x803, len(images), 28, 28) + images.astype(np.uint8).tobytes())
    lp.write_bytes(struct.pack(">II", 0x801, len(labels)) + labels.astype(np.uint8).tobytes())
    return ip, lp


def test_idx_fixture_exact_vectors(tmp_path):
    img = np.zeros((2, 28, 28), dtype=np.uint8)
    img[0, 0, 0] = 255
    img[0, 27, 27] = 51
    img[1, 3, 5] = 102
    ip, lp = _write_idx(tmp_path, img, np.array([7, 2]))
    x, y = ds.load_mnist(ip, lp)
    assert x.shape == (2, 784)
    expected = np.zeros((2, 784))
    expected[0, 0] = 1.0
    expected[0, 783] = 0.2
    expected[1, 3 * 28 + 5] = 0.4
    assert np.array_equal(x, expected)
    assert y.tolist() == [7, 2]


def test_idx_empty_file(tmp_path):
    ip = tmp_path / "empty"
    ip.write_bytes(b"")
    with pytest.raises(DataFormatError, match="offset 0"):
        ds.load_mnist(ip, ip)


def test_idx_bad_magic(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((1, 28, 28)), np.array([1]))
    with pytest.raises(DataFormatError, match="magic"):
        ds.load_mnist(lp, ip)


def test_idx_truncated(tmp_path):
    ip, lp = _write_idx(tmp_path, np.zeros((3, 28, 28)), np.array([1, 2, 3]))
    ip.write_bytes(ip.read_bytes()[:-10])
    with pytest.raises(DataFormatError, match="truncated"):
        ds.load_mnist(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, _ = _write_idx(tmp_path, np.zeros((3, 28, 28)), np.array([1, 2, 3]))
    lp = tmp_path / "lab2"
    lp.write_bytes(struct.pack(">II", 0x801, 2) + bytes([1, 2]))
    with pytest.raises(DataFormatError, match="labels"):
        ds.load_mnist(ip, lp)


# --- MNIST-style partition -------------------------------------------------


def _fake_mnist(n_per_digit=700, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(10), n_per_digit)
    rng.shuffle(labels)
    return rng.random((len(labels), 4)), labels


def test_partition_two_digits_per_device():
    x, y = _fake_mnist()
    fd = ds.partition_mnist_noniid(x, y, 20, seed=1, shard_floor=20)
    assert all(len(np.unique(d.labels)) <= 2 for d in fd.locals)
    assert set(np.concatenate([d.labels for d in fd.locals])) == set(range(10))
    assert fd.sizes.sum() == len(y)
    assert abs(fd.p.sum() - 1) <= 1e-12
    assert len(np.unique(fd.sizes)) > 1


def test_partition_single_device():
    x, y = _fake_mnist(50)
    fd = ds.partition_mnist_noniid(x, y, 1)
    assert fd.n_devices == 1 and fd.p[0] == 1.0 and fd.locals[0].n == len(y)


def test_partition_too_few_samples():
    x, y = _fake_mnist(30)
    with pytest.raises(ConfigError):
        ds.partition_mnist_noniid(x, y, 20, shard_floor=100)


def test_shard_sizes_audit():
    _, y = _fake_mnist()
    parts = ds.mnist_shard_sizes(y, 20, np.random.default_rng(4), floor=20)
    sizes = np.concatenate(parts)
    assert len(sizes) == 40
    assert sizes.sum() == len(y)
    assert len(np.unique(sizes)) > 1


def test_partition_real_mnist(mnist_train):
    x, y = mnist_train
    assert x.shape == (60000, 784)
    assert 0.0 <= x.min() and x.max() <= 1.0
    fd = ds.partition_mnist_noniid(x, y, 100, seed=0)
    assert all(len(np.unique(d.labels)) <= 2 for d in fd.locals)
    assert set(np.concatenate([d.labels for d in fd.locals])) == set(range(10))
    sizes = np.concatenate(ds.mnist_shard_sizes(y, 100, np.random.default_rng(0)))
    assert sizes.sum() == 60000 and len(np.unique(sizes)) > 1


# --- cache -----------------------------------------------------------------


def test_cache_roundtrip(tmp_path):
    fd = ds.generate_synthetic(5, seed=0)
    path = tmp_path / "c.bin"
    ds.save_cache(fd, path)
    back = ds.load_cache(path)
    assert back.n_devices == 5
    for a, b in zip(fd.locals, back.locals):
        assert np.array_equal(a.features.astype(np.float32), b.features)
        assert np.array_equal(a.labels, b.labels)
    assert back.test_set.n == fd.test_set.n
    raw = path.read_bytes()
    assert raw[:5] == b"FEDC1"
    assert struct.unpack_from("<III", raw, 5) == (5, 60, fd.test_set.n)


def test_cache_corruption(tmp_path):
    fd = ds.generate_synthetic(3, seed=0)
    path = tmp_path / "c.bin"
    ds.save_cache(fd, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(DataFormatError):
        ds.load_cache(path)
    path.write_bytes(raw + b"\0")
    with pytest.raises(DataFormatError, match="trailing"):
        ds.load_cache(path)
    path.write_bytes(b"XXXXX" + raw[5:])
    with pytest.raises(DataFormatError, match="magic"):
        ds.load_cache(path)
