"""Federated datasets: synthetic non-iid generator, MNIST IDX loading and
two-digits-per-device partitioning, plus a flat binary cache format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

N_CLASSES = 10
SYNTH_FEATURES = 60
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_MAGIC = b"FEDC1"


@dataclass(frozen=True)
class LocalDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.ndim != 1 or len(x) != len(y):
            raise ConfigError(f"features {x.shape} and labels {y.shape} do not line up")
        if len(y) < 1:
            raise ConfigError("a local dataset needs at least one sample")
        if y.min() < 0 or y.max() >= N_CLASSES:
            raise ConfigError("labels must lie in 0..9")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class FederatedDataset:
    locals: tuple[LocalDataset, ...]
    test_set: LocalDataset | None = None

    @property
    def n_devices(self) -> int:
        return len(self.locals)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([d.n for d in self.locals])

    @property
    def p(self) -> np.ndarray:
        n = self.sizes.astype(float)
        return n / n.sum()

    @property
    def n_features(self) -> int:
        return self.locals[0].features.shape[1]

    def pooled(self) -> LocalDataset:
        return LocalDataset(
            np.concatenate([d.features for d in self.locals]),
            np.concatenate([d.labels for d in self.locals]),
        )


# ---------------------------------------------------------------------------
# Power-law sample counts


def power_law_sizes(n: int, total: int, floor: int, rng: np.random.Generator, shape: float = 1.5) -> np.ndarray:
    """``n`` integer sizes, each >= ``floor``, heavy-tailed (Pareto ``shape``),
    summing exactly to ``total``."""
    if total < n * floor:
        raise ConfigError(f"cannot split {total} samples into {n} parts of at least {floor}")
    z = rng.pareto(shape, size=n) + 1.0
    spare = total - n * floor
    raw = spare * z / z.sum()
    sizes = np.floor(raw).astype(np.int64)
    # largest-remainder rounding keeps the sum exact
    short = spare - int(sizes.sum())
    if short:
        sizes[np.argsort(raw - sizes, kind="stable")[::-1][:short]] += 1
    return sizes + floor


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class DeviceModel:
    """Per-device generative parameters: labelling model (w, b) and the
    feature means v."""

    w: np.ndarray
    b: np.ndarray
    v: np.ndarray


def device_models(n_devices: int, alpha_tilde: float, beta_tilde: float, rng: np.random.Generator) -> list[DeviceModel]:
    """mu_k ~ N(0, alpha_tilde); entries of W_k, b_k ~ N(mu_k, 1);
    B_k ~ N(0, beta_tilde); v_k ~ N(B_k, 1) per feature."""
    if alpha_tilde < 0 or beta_tilde < 0:
        raise ConfigError("alpha_tilde and beta_tilde must be >= 0")
    out = []
    for _ in range(n_devices):
        mu_k = rng.normal(0.0, np.sqrt(alpha_tilde))
        w = rng.normal(mu_k, 1.0, size=(N_CLASSES, SYNTH_FEATURES))
        b = rng.normal(mu_k, 1.0, size=N_CLASSES)
        big_b = rng.normal(0.0, np.sqrt(beta_tilde))
        v = rng.normal(big_b, 1.0, size=SYNTH_FEATURES)
        out.append(DeviceModel(w, b, v))
    return out


def generate_synthetic(
    n_devices: int,
    alpha_tilde: float = 1.0,
    beta_tilde: float = 1.0,
    seed=0,
    total_samples: int | None = None,
    min_samples: int = 50,
    test_fraction: float = 0.2,
) -> FederatedDataset:
    """Synthetic non-iid classification data.

    ``alpha_tilde`` controls how far local models drift apart, ``beta_tilde``
    how far local feature distributions drift apart (both are variances).
    Feature j has variance j^-1.2 around the device's mean. Each device
    holds out ``test_fraction`` of its samples; the held-out samples are
    pooled into the test set. Sizes, models and samples use separate
    streams spawned from ``seed``.
    """
    if n_devices < 1:
        raise ConfigError("n_devices must be >= 1")
    if not 0 <= test_fraction < 1:
        raise ConfigError("test_fraction must lie in [0, 1)")
    size_rng, model_rng, sample_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
    if total_samples is None:
        total_samples = 4 * min_samples * n_devices
    sizes = power_law_sizes(n_devices, total_samples, min_samples, size_rng)
    models = device_models(n_devices, alpha_tilde, beta_tilde, model_rng)
    std = np.arange(1, SYNTH_FEATURES + 1, dtype=float) ** -0.6

    train, test_x, test_y = [], [], []
    for k, dm in enumerate(models):
        x = dm.v + std * sample_rng.standard_normal((sizes[k], SYNTH_FEATURES))
        y = np.argmax(x @ dm.w.T + dm.b, axis=1)
        n_test = min(int(round(test_fraction * sizes[k])), sizes[k] - 1)
        train.append(LocalDataset(x[n_test:], y[n_test:]))
        test_x.append(x[:n_test])
        test_y.append(y[:n_test])
    tx = np.concatenate(test_x)
    test = LocalDataset(tx, np.concatenate(test_y)) if len(tx) else None
    return FederatedDataset(tuple(train), test)


def label_heterogeneity(fd: FederatedDataset) -> float:
    """Chi-square statistic of the device-by-label contingency table."""
    table = np.array([np.bincount(d.labels, minlength=N_CLASSES) for d in fd.locals], dtype=float)
    table = table[:, table.sum(axis=0) > 0]
    expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / table.sum()
    return float(((table - expected) ** 2 / expected).sum())


# ---------------------------------------------------------------------------
# MNIST


def _read_idx(path: str | Path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated at offset {len(raw)}, no magic number")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{path}: bad magic 0x{got:08x} at offset 0, expected 0x{magic:08x}")
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise DataFormatError(
            f"{path}: truncated body at offset {len(raw)}, expected {header + need} bytes"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist(images_path: str | Path, labels_path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair. Images come back flattened and scaled
    to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if images.shape[1:] != (28, 28):
        raise DataFormatError(f"{images_path}: expected 28x28 images, got {images.shape[1:]}")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.reshape(len(images), -1).astype(np.float64) / 255.0
    return x, labels.astype(np.int64)


def load_mnist_dir(root: str | Path) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    root = Path(root)
    train = load_mnist(root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte")
    test = load_mnist(root / "t10k-images-idx3-ubyte", root / "t10k-labels-idx1-ubyte")
    return train, test


def mnist_shard_sizes(labels: np.ndarray, n_devices: int, rng: np.random.Generator, floor: int = 100) -> list[np.ndarray]:
    """Per-label shard sizes. Shards never straddle two digits as long as
    there are at least as many shards as digits present."""
    n_shards = 2 * n_devices
    counts = np.bincount(labels, minlength=N_CLASSES)
    present = np.flatnonzero(counts)
    if n_shards < len(present):
        return [power_law_sizes(n_shards, len(labels), min(floor, len(labels) // n_shards), rng)]
    # shards per digit, proportional to its sample count, at least one each
    share = counts[present] / counts.sum() * n_shards
    per = np.maximum(1, np.floor(share).astype(int))
    while per.sum() < n_shards:
        per[np.argmax(share - per)] += 1
    while per.sum() > n_shards:
        per[np.argmax(np.where(per > 1, per - share, -np.inf))] -= 1
    return [power_law_sizes(int(s), int(counts[c]), floor, rng) for c, s in zip(present, per)]


def partition_mnist_noniid(
    features: np.ndarray,
    labels: np.ndarray,
    n_devices: int,
    seed=0,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    shard_floor: int = 100,
) -> FederatedDataset:
    """Sort by label, cut into ``2 * n_devices`` shards of power-law sizes
    and hand each device two shards at random."""
    if n_devices < 1:
        raise ConfigError("n_devices must be >= 1")
    rng = np.random.default_rng(seed)
    order = np.argsort(labels, kind="stable")
    if n_devices == 1:
        locals_ = (LocalDataset(features[order], labels[order]),)
    else:
        sizes = np.concatenate(mnist_shard_sizes(labels, n_devices, rng, shard_floor))
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        shards = [order[bounds[i] : bounds[i + 1]] for i in range(len(sizes))]
        perm = rng.permutation(len(shards))
        locals_ = tuple(
            LocalDataset(features[idx], labels[idx])
            for idx in (np.concatenate([shards[perm[2 * k]], shards[perm[2 * k + 1]]]) for k in range(n_devices))
        )
    test_set = LocalDataset(*test) if test is not None else None
    return FederatedDataset(locals_, test_set)


# ---------------------------------------------------------------------------
# Cache


def save_cache(fd: FederatedDataset, path: str | Path) -> None:
    """Write the flat binary cache.

    Layout (little-endian): b"FEDC1", uint32 n_devices, uint32 n_features,
    uint32 n_test, uint32 n_k for each device; then per device (and the test
    set last) float32 features row-major followed by uint8 labels.
    """
    test = fd.test_set
    n_test = test.n if test is not None else 0
    parts = [CACHE_MAGIC, struct.pack("<III", fd.n_devices, fd.n_features, n_test)]
    parts.append(np.asarray(fd.sizes, dtype="<u4").tobytes())
    for d in (*fd.locals, *((test,) if test is not None else ())):
        parts.append(np.ascontiguousarray(d.features, dtype="<f4").tobytes())
        parts.append(d.labels.astype(np.uint8).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_cache(path: str | Path) -> FederatedDataset:
    raw = Path(path).read_bytes()
    if raw[:5] != CACHE_MAGIC:
        raise DataFormatError(f"{path}: not a dataset cache (bad magic at offset 0)")
    off = 5
    try:
        n_dev, n_feat, n_test = struct.unpack_from("<III", raw, off)
        off += 12
        sizes = np.frombuffer(raw, dtype="<u4", count=n_dev, offset=off).astype(int)
        off += 4 * n_dev
        blocks = []
        for n in (*sizes, *((n_test,) if n_test else ())):
            x = np.frombuffer(raw, dtype="<f4", count=n * n_feat, offset=off).reshape(n, n_feat)
            off += 4 * n * n_feat
            y = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)
            off += n
            blocks.append(LocalDataset(x.astype(np.float64), y.astype(np.int64)))
    except (struct.error, ValueError) as exc:
        raise DataFormatError(f"{path}: truncated cache near offset {off}") from exc
    if off != len(raw):
        raise DataFormatError(f"{path}: {len(raw) - off} trailing bytes after offset {off}")
    test = blocks.pop() if n_test else None
    return FederatedDataset(tuple(blocks), test)
