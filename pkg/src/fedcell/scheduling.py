"""Optimal expected resource-block allocation.

Minimizes sum_k a_k / q_k with a_k = p_k / U_k over q > 0, sum q = M. The
problem is separable with a single coupling constraint, so stationarity gives
q_k proportional to sqrt(a_k). An equality-constrained Newton solver is kept
as an independent cross-check.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError
from .flcore import SamplingPolicy

CONTRAST_WARNING = 1e8


@dataclass(frozen=True)
class SchedulingProblem:
    p: np.ndarray
    u: np.ndarray
    m: int

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if p.shape != u.shape or p.ndim != 1 or p.size == 0:
            raise ConfigError("p and u must be 1-D arrays of equal length")
        if np.any(u <= 0):
            raise ConfigError("every success probability must be > 0 (infeasible weight p_k/U_k)")
        if np.any(p <= 0):
            raise ConfigError("every weight p_k must be > 0")
        if self.m < 1:
            raise ConfigError("need at least one resource block")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "u", u)

    @property
    def a(self) -> np.ndarray:
        return self.p / self.u


def objective(prob: SchedulingProblem, q: np.ndarray) -> float:
    return float(np.sum(prob.a / np.asarray(q, dtype=float)))


def solve_optimal_q(prob: SchedulingProblem) -> tuple[np.ndarray, float]:
    """Closed-form optimum; returns (q*, objective)."""
    a = prob.a
    if a.max() / a.min() > CONTRAST_WARNING:
        warnings.warn(
            "success-weight contrast exceeds 1e8; reliable devices get vanishing allocations",
            RuntimeWarning,
            stacklevel=2,
        )
    root = np.sqrt(a)
    total = root.sum()
    return prob.m * root / total, float(total**2 / prob.m)


def kkt_residual(prob: SchedulingProblem, q: np.ndarray) -> float:
    """Relative spread of the marginal costs a_k / q_k^2 (zero at optimum)."""
    marg = prob.a / q**2
    return float((marg.max() - marg.min()) / marg.mean())


def verify_with_iterative_solver(prob: SchedulingProblem, tol: float = 1e-12, max_iter: int = 500) -> np.ndarray:
    """Damped Newton steps restricted to the hyperplane sum q = M, started
    from the uniform allocation and kept strictly positive."""
    if not tol > 0:
        raise ConfigError("tol must be > 0")
    a = prob.a
    n = a.size
    q = np.full(n, prob.m / n)
    for _ in range(max_iter):
        if kkt_residual(prob, q) < tol:
            return q
        g = -a / q**2
        h = 2.0 * a / q**3
        nu = np.sum(g / h) / np.sum(1.0 / h)
        step = -(g - nu) / h
        f0 = objective(prob, q)
        slope = float(g @ step)
        s = 1.0
        neg = step < 0
        if neg.any():
            s = min(1.0, 0.99 * float(np.min(-q[neg] / step[neg])))
        while objective(prob, q + s * step) > f0 + 1e-4 * s * slope and s > 1e-16:
            s *= 0.5
        q = q + s * step
        q *= prob.m / q.sum()
    raise ConvergenceError(f"Newton solver exceeded {max_iter} iterations (KKT residual {kkt_residual(prob, q):.2e})")


def to_sampling_policy(q_star: np.ndarray, m: int | None = None) -> SamplingPolicy:
    """Scheme II policy with selection probabilities q*_k / M."""
    q_star = np.asarray(q_star, dtype=float)
    total = q_star.sum()
    if m is not None and abs(total - m) > 1e-9 * m:
        raise ConfigError(f"allocation sums to {total}, expected {m}")
    probs = q_star / total
    return SamplingPolicy("II", probs)
