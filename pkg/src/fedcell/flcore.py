"""Federated training over an unreliable uplink.

One round: the base station samples devices onto its M resource blocks,
broadcasts the global model, each scheduled device runs E local SGD steps
and uploads its model difference, and the base station aggregates whatever
arrived.

Randomness is split into independent streams keyed by (seed, purpose,
round[, device]). Schedules and channel outcomes therefore do not depend on
the model trajectory, so runs that differ only in the aggregation rule see
the same draws.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

import numpy as np
from scipy import optimize
from scipy.sparse import linalg as sparse_linalg

from . import model as mdl
from .datasets import FederatedDataset, LocalDataset
from .errors import ConfigError, ConvergenceError, NumericalError
from .wireless import simulate_successes

Scheme = Literal["I", "II"]
Rule = Literal["unbiased", "biased_fraction", "biased_weighted"]
RULES: tuple[Rule, ...] = ("unbiased", "biased_fraction", "biased_weighted")

_SCHED, _CHAN, _SGD, _EVAL = 1, 2, 3, 4


@dataclass(frozen=True)
class SamplingPolicy:
    """Scheme I: uniform M-subset without replacement. Scheme II: M i.i.d.
    draws with probabilities ``probs``."""

    scheme: Scheme = "I"
    probs: np.ndarray | None = None

    def __post_init__(self):
        if self.scheme not in ("I", "II"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "II":
            if self.probs is None:
                raise ConfigError("scheme II needs selection probabilities")
            p = np.asarray(self.probs, dtype=float)
            # zeros are allowed here; unbiased aggregation rejects q_k U_k = 0 separately
            if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ConfigError("scheme II probabilities must be non-negative and sum to 1")
            object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, scheme: Scheme, n_devices: int) -> "SamplingPolicy":
        if scheme == "I":
            return cls("I")
        return cls("II", np.full(n_devices, 1.0 / n_devices))

    def q(self, n_devices: int, m: int) -> np.ndarray:
        """Expected number of resource blocks per device."""
        if self.scheme == "I":
            return np.full(n_devices, m / n_devices)
        if len(self.probs) != n_devices:
            raise ConfigError("probability vector length differs from device count")
        return m * self.probs


def sample_schedule(policy: SamplingPolicy, n_devices: int, m: int, rng: np.random.Generator) -> np.ndarray:
    if policy.scheme == "I":
        if m > n_devices:
            raise ConfigError("scheme I cannot schedule more blocks than devices")
        return rng.choice(n_devices, size=m, replace=False)
    return rng.choice(n_devices, size=m, replace=True, p=policy.probs)


# ---------------------------------------------------------------------------
# Learning rates


@dataclass(frozen=True)
class PracticalLR:
    """eta0 / (1 + round), constant within a round."""

    eta0: float

    def __call__(self, t: int, rnd: int) -> float:
        return self.eta0 / (1.0 + rnd)


@dataclass(frozen=True)
class TheoryLR:
    """2 / (mu (gamma + t)), where t counts local steps."""

    mu: float
    gamma: float

    @classmethod
    def from_constants(cls, mu: float, L: float, local_steps: int) -> "TheoryLR":
        if not mu > 0:
            raise ConfigError("theory learning rate needs mu > 0")
        return cls(mu, max(8.0 * L / mu, float(local_steps)))

    def __call__(self, t: int, rnd: int) -> float:
        return 2.0 / (self.mu * (self.gamma + t))


@dataclass(frozen=True)
class TrainConfig:
    rounds: int
    local_steps: int = 1
    batch_size: int | None = None  # None means full local batch
    lr: PracticalLR | TheoryLR = PracticalLR(0.1)
    seed: int = 0
    eval_every: int = 1
    eval_rounds: frozenset[int] | None = None  # overrides eval_every
    eval_samples: int | None = None

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.local_steps < 1:
            raise ConfigError("local_steps must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def evaluates(self, rnd: int) -> bool:
        if self.eval_rounds is not None:
            return rnd in self.eval_rounds
        return (rnd + 1) % self.eval_every == 0 or rnd == self.rounds - 1


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


# ---------------------------------------------------------------------------
# Local SGD


def draw_batch(n: int, batch_size: int | None, rng: np.random.Generator) -> np.ndarray | None:
    if batch_size is None:
        return None
    if n >= batch_size:
        return rng.choice(n, size=batch_size, replace=False)
    return rng.integers(0, n, size=batch_size)


def local_sgd(
    spec: mdl.LossSpec,
    data: LocalDataset,
    w_global: np.ndarray,
    rates: Sequence[float],
    batch_size: int | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Run ``len(rates)`` SGD steps from ``w_global`` and return the model
    difference v - w_global that the device uploads."""
    if len(rates) < 1:
        raise ConfigError("need at least one local step")
    w = np.array(w_global, dtype=float, copy=True)
    x, y = data.features, data.labels
    w, x, y = mdl._check(spec, w, x, y)
    for eta in rates:
        idx = draw_batch(len(y), batch_size, rng)
        xb, yb = (x, y) if idx is None else (x[idx], y[idx])
        g = mdl.loss_and_grad(spec, w, xb, yb, check=False)[1]
        with np.errstate(over="ignore", invalid="ignore"):
            w -= eta * mdl.clip(g, spec.clip_norm)
        if not np.all(np.isfinite(w)):
            raise NumericalError(f"local SGD diverged (learning rate {eta:g}); lower the learning rate")
    return w - w_global


# ---------------------------------------------------------------------------
# Aggregation


def aggregate(
    rule: Rule,
    w_prev: np.ndarray,
    updates: Sequence[tuple[int, np.ndarray, bool]],
    p: np.ndarray,
    q: np.ndarray,
    u: np.ndarray,
) -> np.ndarray:
    """Combine per-block uploads ``(device, v - w_prev, success)``.

    ``unbiased`` reweights each received difference by p_k / (q_k U_k).
    ``biased_fraction`` averages received models over all M blocks and
    keeps ``w_prev`` when nothing arrives. ``biased_weighted`` averages the
    received differences over the number of successes (0/0 = 0).
    """
    n = len(p)
    for k, _, _ in updates:
        if not 0 <= k < n:
            raise IndexError(f"device index {k} out of range for {n} devices")
    ok = [(k, d) for k, d, s in updates if s]
    if rule == "unbiased":
        w = np.array(w_prev, dtype=float, copy=True)
        for k, d in ok:
            qu = q[k] * u[k]
            if not qu > 0:
                raise NumericalError(f"device {k} has q*U = {qu}; unbiased weighting undefined")
            w += (p[k] / qu) * d
        return w
    if rule == "biased_weighted":
        w = np.array(w_prev, dtype=float, copy=True)
        if ok:
            w += sum(d for _, d in ok) / len(ok)
        return w
    if rule == "biased_fraction":
        if not ok:
            return np.array(w_prev, dtype=float, copy=True)
        return sum(w_prev + d for _, d in ok) / len(updates)
    raise ConfigError(f"unknown aggregation rule {rule!r}")


# ---------------------------------------------------------------------------
# Success sources


class SuccessSource(Protocol):
    u: np.ndarray

    def draw(self, scheduled: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class FixedSuccess:
    """Independent Bernoulli(U_k) outcome on every block."""

    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if np.any(u <= 0) or np.any(u > 1):
            raise ConfigError("success probabilities must lie in (0, 1]")
        object.__setattr__(self, "u", u)

    def draw(self, scheduled, rng):
        return rng.random(len(scheduled)) < self.u[scheduled]


@dataclass(frozen=True)
class ChannelSuccess:
    """Outcomes simulated from the cell geometry; ``u`` is the success
    model used for reweighting."""

    cfg: object
    cell: object
    u: np.ndarray

    def draw(self, scheduled, rng):
        return simulate_successes(self.cfg, self.cell.device_distances[scheduled], rng)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class RoundTrace:
    round: int
    t: int
    scheduled: tuple[int, ...]
    success: tuple[bool, ...]
    pre_loss: float | None = None
    global_loss: float | None = None
    train_acc: float | None = None
    test_acc: float | None = None
    wall_time: float = 0.0

    @property
    def n_success(self) -> int:
        return int(sum(self.success))


@dataclass
class Evaluator:
    spec: mdl.LossSpec
    x: np.ndarray
    y: np.ndarray
    test: LocalDataset | None = None

    @classmethod
    def build(cls, dataset: FederatedDataset, spec: mdl.LossSpec, samples: int | None = None, seed: int = 0):
        pooled = dataset.pooled()
        x, y = pooled.features, pooled.labels
        if samples is not None and samples < len(y):
            idx = np.sort(stream(seed, _EVAL).choice(len(y), size=samples, replace=False))
            x, y = x[idx], y[idx]
        return cls(spec, x, y, dataset.test_set)

    def global_loss(self, w: np.ndarray) -> float:
        val = mdl.loss(self.spec, w, self.x, self.y)
        if not math.isfinite(val):
            raise NumericalError("global loss became non-finite; lower the learning rate")
        return val

    def metrics(self, w: np.ndarray) -> tuple[float, float | None, float | None]:
        val = self.global_loss(w)
        if self.spec.family == "quadratic":
            return val, None, None
        tr = mdl.accuracy(self.spec, w, self.x, self.y)
        te = mdl.accuracy(self.spec, w, self.test.features, self.test.labels) if self.test is not None else None
        return val, tr, te


def run_federated(
    dataset: FederatedDataset,
    spec: mdl.LossSpec,
    policy: SamplingPolicy,
    rule: Rule,
    channel: SuccessSource,
    m: int,
    train: TrainConfig,
    w0: np.ndarray | None = None,
    evaluator: Evaluator | None = None,
) -> tuple[np.ndarray, list[RoundTrace]]:
    """Train for ``train.rounds`` rounds and return the final global model
    with traces for the evaluated rounds."""
    n = dataset.n_devices
    p = dataset.p
    q = policy.q(n, m)
    u = np.asarray(channel.u, dtype=float)
    if len(u) != n:
        raise ConfigError(f"success vector has {len(u)} entries for {n} devices")
    if rule == "unbiased" and np.any(q * u <= 0):
        raise ConfigError("unbiased aggregation needs q_k U_k > 0 for every device")
    w = np.array(init_or(w0, spec), dtype=float)
    if evaluator is None:
        evaluator = Evaluator.build(dataset, spec, train.eval_samples, train.seed)
    E = train.local_steps
    sched_rng = stream(train.seed, _SCHED)
    chan_rng = stream(train.seed, _CHAN)
    traces: list[RoundTrace] = []
    prev_loss = evaluator.global_loss(w) if train.rounds else None

    for rnd in range(train.rounds):
        tic = time.perf_counter()
        t0 = rnd * E
        scheduled = sample_schedule(policy, n, m, sched_rng)
        success = channel.draw(scheduled, chan_rng)
        rates = [train.lr(t0 + i, rnd) for i in range(E)]
        deltas: dict[int, np.ndarray] = {}
        for k in dict.fromkeys(scheduled.tolist()):
            deltas[k] = local_sgd(spec, dataset.locals[k], w, rates, train.batch_size, stream(train.seed, _SGD, rnd, k))
        w = aggregate(rule, w, [(k, deltas[k], bool(s)) for k, s in zip(scheduled.tolist(), success)], p, q, u)
        if train.evaluates(rnd):
            val, tr, te = evaluator.metrics(w)
            traces.append(
                RoundTrace(
                    rnd, t0 + E, tuple(scheduled.tolist()), tuple(bool(s) for s in success),
                    prev_loss, val, tr, te, time.perf_counter() - tic,
                )
            )
            prev_loss = val
    return w, traces


def init_or(w0, spec: mdl.LossSpec) -> np.ndarray:
    return mdl.init_params(spec) if w0 is None else np.asarray(w0, dtype=float)


# ---------------------------------------------------------------------------
# Centralized benchmark


def full_gradient(spec: mdl.LossSpec, dataset: FederatedDataset, w: np.ndarray) -> np.ndarray:
    """Gradient of F = sum_k p_k F_k, computed on the pooled data."""
    pooled = dataset.pooled()
    return mdl.grad(spec, w, pooled.features, pooled.labels)


def run_centralized_gd(
    dataset: FederatedDataset,
    spec: mdl.LossSpec,
    lr: PracticalLR | TheoryLR,
    rounds: int,
    w0: np.ndarray | None = None,
) -> tuple[np.ndarray, list[RoundTrace]]:
    pooled = dataset.pooled()
    x, y = pooled.features, pooled.labels
    evaluator = Evaluator(spec, x, y, dataset.test_set)
    w = np.array(init_or(w0, spec), dtype=float)
    traces = []
    prev = evaluator.global_loss(w) if rounds else None
    for k in range(rounds):
        tic = time.perf_counter()
        w = w - lr(k, k) * mdl.grad(spec, w, x, y)
        val, tr, te = evaluator.metrics(w)
        traces.append(RoundTrace(k, k + 1, (), (), prev, val, tr, te, time.perf_counter() - tic))
        prev = val
    return w, traces


def minimize_full_batch(
    spec: mdl.LossSpec,
    x: np.ndarray,
    y: np.ndarray,
    L: float,
    w0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
) -> tuple[np.ndarray, float]:
    """Minimize a strongly convex batch loss until the gradient norm drops to
    ``tol``. Returns (w*, F*).

    L-BFGS gets close; Newton-CG steps with exact Hessian-vector products
    finish, using the gradient norm (not the loss, which is flat to machine
    precision there) to accept steps.
    """
    w = np.array(init_or(w0, spec), dtype=float)

    def fun(v):
        return mdl.loss_and_grad(spec, v, x, y)

    res = optimize.minimize(
        fun, w, jac=True, method="L-BFGS-B",
        options={"maxiter": 20_000, "maxcor": 30, "ftol": 0.0, "gtol": tol},
    )
    if np.all(np.isfinite(res.x)):
        w = res.x
    val, g = fun(w)
    gnorm = float(np.linalg.norm(g))
    n = w.size
    for _ in range(max_iter):
        if gnorm <= tol:
            return w, val
        hess = sparse_linalg.LinearOperator((n, n), matvec=lambda v, w=w: mdl.hess_vec(spec, w, x, y, v))
        step, _ = sparse_linalg.cg(hess, -g, rtol=1e-3 * min(1.0, gnorm), maxiter=10 * n)
        s = 1.0
        while True:
            cand = w + s * step
            cval, cg = fun(cand)
            cnorm = float(np.linalg.norm(cg))
            if cnorm < gnorm or s < 1e-8:
                break
            s *= 0.5
        if cnorm >= gnorm:
            # Newton made no progress; fall back to a gradient step
            cand = w - g / L
            cval, cg = fun(cand)
            cnorm = float(np.linalg.norm(cg))
        w, val, g, gnorm = cand, cval, cg, cnorm
    raise ConvergenceError(f"did not reach |grad| <= {tol} (last {gnorm:.2e}) in {max_iter} Newton steps")
