"""Convergence-bound arithmetic for strongly convex, smooth objectives.

The bound after T = K*E local steps with eta_t = 2 / (mu (gamma + t)) and
gamma = max(8 L / mu, E) reads

    (L/mu) / D * [ (2/mu) * (sum p_k^2 sigma_k^2 + 6 L Gamma + 8 (E-1)^2 G^2
                              + 4 E^2 G^2 B) + (mu gamma / 2) |w0 - w*|^2 ]

with D = gamma + T (time-indexed form) or D = K*E (round-indexed form).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .errors import ConfigError

Scheme = Literal["I", "II"]


@dataclass(frozen=True)
class BoundInputs:
    mu: float
    L: float
    sigma_sq: np.ndarray
    gamma_cap: float
    g: float
    p: np.ndarray
    q: np.ndarray
    u: np.ndarray
    m: int
    e_steps: int
    k_rounds: int
    w0_dist_sq: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ConfigError("mu must be > 0")
        if self.L < self.mu:
            raise ConfigError("need mu <= L")
        if self.gamma_cap < 0:
            raise ConfigError("Gamma must be >= 0")
        if self.e_steps < 1 or self.k_rounds < 1:
            raise ConfigError("E and K must be >= 1")
        arrays = {}
        for name in ("sigma_sq", "p", "q", "u"):
            arrays[name] = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), np.shape(self.p)).copy()
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    def with_(self, **changes) -> "BoundInputs":
        return replace(self, **changes)

    @property
    def gamma(self) -> float:
        return max(8.0 * self.L / self.mu, float(self.e_steps))


def compute_B(p, q, u, m: int, scheme: Scheme) -> float:
    p, q, u = (np.asarray(v, dtype=float) for v in (p, q, u))
    qu = q * u
    if np.any(qu <= 0):
        raise ConfigError("every q_k U_k must be > 0")
    if scheme == "I":
        return float(np.sum(p * (1.0 / qu - 1.0)))
    if scheme == "II":
        return float(np.sum(p * (1.0 / qu - 1.0 / m)))
    raise ConfigError(f"unknown scheme {scheme!r}")


def _bracket(inp: BoundInputs, scheme: Scheme) -> float:
    E = inp.e_steps
    G2 = inp.g**2
    B = compute_B(inp.p, inp.q, inp.u, inp.m, scheme)
    noise = float(np.sum(inp.p**2 * inp.sigma_sq)) + 6.0 * inp.L * inp.gamma_cap
    noise += 8.0 * (E - 1) ** 2 * G2 + 4.0 * E**2 * G2 * B
    return (2.0 / inp.mu) * noise + 0.5 * inp.mu * inp.gamma * inp.w0_dist_sq


def theorem1_bound(inp: BoundInputs, scheme: Scheme) -> float:
    """Bound on E[F(w_T) - F*] at T = K*E, denominator gamma + T."""
    T = inp.k_rounds * inp.e_steps
    return (inp.L / inp.mu) / (inp.gamma + T) * _bracket(inp, scheme)


def round_indexed_bound(inp: BoundInputs, scheme: Scheme) -> float:
    """Round-indexed form of the bound, denominator K*E."""
    T = inp.k_rounds * inp.e_steps
    return (inp.L / inp.mu) / T * _bracket(inp, scheme)


class ESearch(NamedTuple):
    best: int
    values: list[tuple[int, float]]


def optimal_E_search(
    inp: BoundInputs,
    e_range: Sequence[int],
    scheme: Scheme = "I",
    mode: Literal["fixed_K", "fixed_T"] = "fixed_K",
) -> ESearch:
    """Scan E and return the minimizer of the round-indexed bound.

    ``fixed_K`` keeps the number of rounds; ``fixed_T`` keeps K*E equal to
    the input's K*E (E values that do not divide it are skipped).
    """
    e_range = list(e_range)
    if not e_range:
        raise ConfigError("E range is empty")
    total = inp.k_rounds * inp.e_steps
    curve = []
    for E in e_range:
        if mode == "fixed_K":
            k = inp.k_rounds
        elif mode == "fixed_T":
            if total % E:
                continue
            k = total // E
        else:
            raise ConfigError(f"unknown mode {mode!r}")
        curve.append((E, round_indexed_bound(inp.with_(e_steps=E, k_rounds=k), scheme)))
    if not curve:
        raise ConfigError("no E in range divides the fixed horizon")
    best = min(curve, key=lambda item: item[1])[0]
    return ESearch(best, curve)


class KvsEll(NamedTuple):
    bound_k_scaled: float
    bound_ell_scaled: float

    @property
    def k_wins(self) -> bool:
        return self.bound_k_scaled <= self.bound_ell_scaled


def compare_K_vs_ell(inp: BoundInputs, u1, u_ell, ell: int, scheme: Scheme = "I") -> KvsEll:
    """Round-indexed bound with K -> ell*K (single attempt) versus with the
    success probabilities of ell attempts."""
    u1 = np.asarray(u1, dtype=float)
    u_ell = np.asarray(u_ell, dtype=float)
    if u1.shape != u_ell.shape or u1.shape != inp.p.shape:
        raise ConfigError("success vectors must match the device count")
    if ell < 1:
        raise ConfigError("ell must be >= 1")
    if np.any(u_ell < u1 - 1e-12) or np.any(u_ell > np.minimum(1.0, ell * u1) + 1e-12):
        raise ConfigError("U^(ell) must lie between U^(1) and min(1, ell U^(1))")
    k_scaled = round_indexed_bound(inp.with_(u=u1, k_rounds=ell * inp.k_rounds), scheme)
    ell_scaled = round_indexed_bound(inp.with_(u=u_ell), scheme)
    return KvsEll(k_scaled, ell_scaled)


# ---------------------------------------------------------------------------
# Empirical constants (approximate)


class EstimatedConstants(NamedTuple):
    mu: float
    L: float
    sigma_sq: np.ndarray
    gamma_cap: float
    g: float
    w_star: np.ndarray
    f_star: float


def estimate_constants(spec, dataset, batch_size: int | None, w0: np.ndarray, tol: float = 1e-10) -> EstimatedConstants:
    """Estimate the analytic constants from data.

    Gamma = F* - sum_k p_k F_k* uses exact local and global minimizers.
    sigma_k^2 is the mini-batch gradient variance at w0 and w* (larger of
    the two). G bounds the stochastic gradient norm: sqrt(2) times the
    largest augmented feature norm plus l2 times a radius covering w0 and
    w*. These are estimates, not certified constants.
    """
    from . import model as mdl
    from .flcore import minimize_full_batch

    mu, L = mdl.strong_convexity_constants(spec, dataset)
    pooled = dataset.pooled()
    w_star, f_star = minimize_full_batch(spec, pooled.features, pooled.labels, L, w0=w0, tol=tol)
    local_opt = []
    sig = []
    max_feat = 0.0
    for d in dataset.locals:
        _, fk = minimize_full_batch(spec, d.features, d.labels, L, w0=w_star, tol=max(tol, 1e-9))
        local_opt.append(fk)
        per = []
        for w in (w0, w_star):
            full = mdl.grad(spec, w, d.features, d.labels)
            g_i = np.stack([mdl.grad(spec, w, d.features[i : i + 1], d.labels[i : i + 1]) for i in range(d.n)])
            var1 = float(np.mean(np.sum((g_i - full) ** 2, axis=1)))
            b = d.n if batch_size is None else batch_size
            # sampling without replacement shrinks the variance further
            fpc = 0.0 if batch_size is None else (max(d.n - b, 0) / max(d.n - 1, 1) if d.n >= b else 1.0)
            per.append(var1 / b * fpc)
        sig.append(max(per))
        sq = np.einsum("ij,ij->i", d.features, d.features) + float(getattr(spec, "bias", False))
        max_feat = max(max_feat, float(np.sqrt(sq.max())))
    p = dataset.p
    gamma_cap = max(0.0, f_star - float(np.dot(p, local_opt)))
    radius = float(np.linalg.norm(w_star)) + float(np.linalg.norm(w0 - w_star))
    if spec.family == "quadratic":
        g = max(float(np.linalg.norm(d.features, axis=1).max()) for d in dataset.locals) + radius * (1 + spec.l2)
    else:
        g = math.sqrt(2.0) * max_feat + spec.l2 * radius
    return EstimatedConstants(mu, L, np.array(sig), gamma_cap, g, w_star, f_star)
