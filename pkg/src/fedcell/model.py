"""Loss families over flat parameter vectors.

* ``logistic``: multinomial logistic regression with L2; strongly convex.
* ``mlp``: ReLU network with softmax output.
* ``quadratic``: F(w) = mean_i 0.5*|w - x_i|^2, labels ignored. Used for
  toy problems whose minimizers are known in closed form.

Every family adds (l2 / 2) * |w|^2 over all weights and biases.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import ConfigError, DataFormatError, NumericalError

Family = Literal["logistic", "mlp", "quadratic"]


@dataclass(frozen=True)
class LossSpec:
    family: Family = "logistic"
    n_features: int = 60
    n_classes: int = 10
    l2: float = 1e-4
    hidden: tuple[int, ...] = (300, 300)
    bias: bool = True
    clip_norm: float | None = None

    def __post_init__(self):
        if self.family not in ("logistic", "mlp", "quadratic"):
            raise ConfigError(f"unknown loss family {self.family!r}")
        if self.l2 < 0:
            raise ConfigError("l2 must be >= 0")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be > 0")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        if self.family == "mlp":
            return (self.n_features, *self.hidden, self.n_classes)
        return (self.n_features, self.n_classes)

    @property
    def n_params(self) -> int:
        if self.family == "quadratic":
            return self.n_features
        if self.family == "logistic":
            return self.n_classes * (self.n_features + int(self.bias))
        s = self.layer_sizes
        return sum(o * i + o for i, o in zip(s[:-1], s[1:]))


def init_params(spec: LossSpec, seed=0) -> np.ndarray:
    """Zero for the convex families; Glorot-uniform weights and zero biases
    for the MLP."""
    if spec.family != "mlp":
        return np.zeros(spec.n_params)
    rng = np.random.default_rng(seed)
    parts = []
    s = spec.layer_sizes
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-lim, lim, size=fan_out * fan_in))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def _unpack_mlp(spec: LossSpec, w: np.ndarray):
    layers = []
    off = 0
    s = spec.layer_sizes
    for fan_in, fan_out in zip(s[:-1], s[1:]):
        W = w[off : off + fan_out * fan_in].reshape(fan_out, fan_in)
        off += fan_out * fan_in
        b = w[off : off + fan_out]
        off += fan_out
        layers.append((W, b))
    return layers


def _unpack_logistic(spec: LossSpec, w: np.ndarray):
    C, d = spec.n_classes, spec.n_features
    W = w[: C * d].reshape(C, d)
    b = w[C * d :] if spec.bias else None
    return W, b


def _check(spec: LossSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray):
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if w.shape != (spec.n_params,):
        raise ConfigError(f"parameter vector has shape {w.shape}, expected ({spec.n_params},)")
    if x.ndim != 2 or x.shape[1] != spec.n_features:
        raise ConfigError(f"batch features have shape {x.shape}, expected (b, {spec.n_features})")
    if len(x) == 0 or len(y) != len(x):
        raise ConfigError("batch must be non-empty with one label per row")
    if not (np.isfinite(w).all() and np.isfinite(x).all()):
        raise NumericalError("non-finite parameters or features")
    return w, x, y


def canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order that depends only on batch contents, not on input order."""
    return np.lexsort((*x.T[::-1], y))


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    n = len(y)
    ce = -logp[np.arange(n), y].mean()
    probs = ez / s
    return ce, probs


def loss_and_grad(
    spec: LossSpec,
    w: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    need_grad: bool = True,
    canonical: bool = False,
    check: bool = True,
):
    """Mean batch loss plus regularizer, and its exact gradient.

    With ``canonical=True`` rows are reordered first, which makes the result
    bitwise invariant to batch permutation. ``check=False`` skips input
    validation for callers that already validated float arrays.
    """
    if check:
        w, x, y = _check(spec, w, x, y)
    if canonical:
        order = canonical_order(x, y)
        x, y = x[order], y[order]
    n = len(x)
    reg = 0.5 * spec.l2 * float(w @ w)

    if spec.family == "quadratic":
        diff = w[None, :] - x
        val = 0.5 * float(np.einsum("ij,ij->", diff, diff)) / n + reg
        g = w - x.mean(axis=0) + spec.l2 * w if need_grad else None
        return val, g

    if spec.family == "logistic":
        W, b = _unpack_logistic(spec, w)
        logits = x @ W.T
        if b is not None:
            logits += b
        ce, probs = _softmax_xent(logits, y)
        if not need_grad:
            return ce + reg, None
        probs[np.arange(n), y] -= 1.0
        probs /= n
        gW = probs.T @ x
        parts = [gW.ravel()]
        if b is not None:
            parts.append(probs.sum(axis=0))
        return ce + reg, np.concatenate(parts) + spec.l2 * w

    layers = _unpack_mlp(spec, w)
    acts = [x]
    h = x
    for W, b in layers[:-1]:
        h = np.maximum(h @ W.T + b, 0.0)
        acts.append(h)
    W, b = layers[-1]
    ce, probs = _softmax_xent(h @ W.T + b, y)
    if not need_grad:
        return ce + reg, None
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        a = acts[li]
        grads.append((delta.T @ a, delta.sum(axis=0)))
        if li:
            delta = (delta @ W) * (a > 0)
    flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
    return ce + reg, flat + spec.l2 * w


def hess_vec(spec: LossSpec, w: np.ndarray, x: np.ndarray, y: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Exact Hessian-vector product of the batch loss (convex families)."""
    w, x, y = _check(spec, w, x, y)
    v = np.asarray(v, dtype=float)
    if spec.family == "quadratic":
        return (1.0 + spec.l2) * v
    if spec.family != "logistic":
        raise ConfigError("Hessian-vector products are only implemented for convex families")
    W, b = _unpack_logistic(spec, w)
    Vw, vb = _unpack_logistic(spec, v)
    logits = x @ W.T + (b if b is not None else 0.0)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs = z / z.sum(axis=1, keepdims=True)
    dz = x @ Vw.T + (vb if vb is not None else 0.0)
    r = probs * (dz - np.sum(probs * dz, axis=1, keepdims=True)) / len(x)
    parts = [(r.T @ x).ravel()]
    if b is not None:
        parts.append(r.sum(axis=0))
    return np.concatenate(parts) + spec.l2 * v


def loss(spec: LossSpec, w, x, y, canonical: bool = False) -> float:
    return loss_and_grad(spec, w, x, y, need_grad=False, canonical=canonical)[0]


def grad(spec: LossSpec, w, x, y, canonical: bool = False) -> np.ndarray:
    return loss_and_grad(spec, w, x, y, canonical=canonical)[1]


def clip(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


def predict(spec: LossSpec, w: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.family == "quadratic":
        raise ConfigError("quadratic family has no class predictions")
    if spec.family == "logistic":
        W, b = _unpack_logistic(spec, w)
        logits = x @ W.T + (b if b is not None else 0.0)
    else:
        h = x
        layers = _unpack_mlp(spec, w)
        for W, b in layers[:-1]:
            h = np.maximum(h @ W.T + b, 0.0)
        W, b = layers[-1]
        logits = h @ W.T + b
    return np.argmax(logits, axis=1)


def accuracy(spec: LossSpec, w, x, y) -> float:
    return float(np.mean(predict(spec, w, x) == y))


def strong_convexity_constants(spec: LossSpec, dataset) -> tuple[float, float]:
    """(mu, L) for the logistic family.

    mu is the L2 coefficient. L adds half of the largest per-device mean
    squared feature norm (bias input included), since the softmax Hessian
    has spectral norm at most 1/2.
    """
    if spec.family == "quadratic":
        return 1.0 + spec.l2, 1.0 + spec.l2
    if spec.family != "logistic":
        raise ConfigError("strong convexity constants are only defined for the logistic family")
    worst = 0.0
    for d in dataset.locals:
        sq = np.einsum("ij,ij->i", d.features, d.features) + float(spec.bias)
        worst = max(worst, float(sq.mean()))
    return spec.l2, spec.l2 + 0.5 * worst


# ---------------------------------------------------------------------------
# Checkpoints

PARAMS_MAGIC = b"FEDW1"
_FAMILY_CODES = {"logistic": 0, "mlp": 1, "quadratic": 2}


def save_params(spec: LossSpec, w: np.ndarray, path: str | Path) -> None:
    """Flat parameter checkpoint.

    Layout (little-endian): b"FEDW1", uint32 family code, n_features,
    n_classes, bias flag, number of hidden layers, each hidden width, then
    the parameter vector as float32.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (spec.n_params,):
        raise ConfigError(f"parameter vector has shape {w.shape}, expected ({spec.n_params},)")
    head = [_FAMILY_CODES[spec.family], spec.n_features, spec.n_classes, int(spec.bias), len(spec.hidden), *spec.hidden]
    Path(path).write_bytes(PARAMS_MAGIC + struct.pack(f"<{len(head)}I", *head) + w.astype("<f4").tobytes())


def load_params(path: str | Path, l2: float = 1e-4) -> tuple[LossSpec, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:5] != PARAMS_MAGIC:
        raise DataFormatError(f"{path}: not a parameter checkpoint (bad magic at offset 0)")
    try:
        code, d, c, bias, n_hidden = struct.unpack_from("<5I", raw, 5)
        off = 25
        hidden = struct.unpack_from(f"<{n_hidden}I", raw, off)
        off += 4 * n_hidden
    except struct.error as exc:
        raise DataFormatError(f"{path}: truncated header") from exc
    families = {v: k for k, v in _FAMILY_CODES.items()}
    if code not in families:
        raise DataFormatError(f"{path}: unknown family code {code} at offset 5")
    spec = LossSpec(families[code], d, c, l2, tuple(hidden), bool(bias))
    need = off + 4 * spec.n_params
    if len(raw) != need:
        raise DataFormatError(f"{path}: expected {need} bytes, found {len(raw)}")
    return spec, np.frombuffer(raw, dtype="<f4", offset=off).astype(np.float64)
