"""Cellular uplink model: geometry sampling, SINR outcomes and success probability.

The tagged base station sits at the origin. Devices are dropped uniformly in
its Voronoi cell; interferers on a scheduled resource block are modelled as a
non-homogeneous Poisson process with intensity

    density * (1 - exp(-INTENSITY_FACTOR * density * pi * |x|^2))

which is the approximation the analytic success probability integrates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy import integrate

from .errors import ConfigError, NumericalError

INTENSITY_FACTOR = 12.0 / 5.0
MIN_MC_DRAWS = 10_000
_MC_CHUNK = 20_000
_REJECTION_BATCHES = 200
_REJECTION_BATCH = 4096


def db_to_linear(db: float) -> float:
    return 10.0 ** (db / 10.0)


@dataclass(frozen=True)
class NetworkConfig:
    """Cellular network parameters.

    ``theta`` is the linear SINR threshold; use :meth:`with_theta_db` or
    :func:`db_to_linear` when starting from decibels. ``sim_window`` is the
    half-width of the square in which base stations are sampled and defaults
    to ``5 / sqrt(density)``.
    """

    density: float = 1e-3
    n_devices: int = 100
    n_rbs: int = 20
    noise: float = 1e-4
    alpha: float = 4.0
    theta: float = 10.0 ** (-1.5)
    attempts: int = 1
    sim_window: float | None = None
    interference: bool = True
    quantile_distances: bool = False

    def __post_init__(self):
        if not self.density > 0:
            raise ConfigError(f"density must be > 0, got {self.density}")
        if self.n_devices < 1:
            raise ConfigError("n_devices must be >= 1")
        if not 1 <= self.n_rbs <= self.n_devices:
            raise ConfigError(f"need 1 <= n_rbs <= n_devices, got M={self.n_rbs}, N={self.n_devices}")
        if not self.alpha > 2:
            raise ConfigError(f"path-loss exponent must exceed 2, got {self.alpha}")
        if not self.theta > 0:
            raise ConfigError("theta must be > 0")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")
        if self.attempts < 1:
            raise ConfigError("attempts must be >= 1")
        if self.sim_window is not None and self.sim_window <= 0:
            raise ConfigError("sim_window must be > 0")

    @classmethod
    def with_theta_db(cls, theta_db: float, **kwargs) -> "NetworkConfig":
        return cls(theta=db_to_linear(theta_db), **kwargs)

    @property
    def window(self) -> float:
        if self.sim_window is not None:
            return self.sim_window
        return 5.0 / math.sqrt(self.density)

    def replace(self, **changes) -> "NetworkConfig":
        from dataclasses import replace

        return replace(self, **changes)


@dataclass(frozen=True)
class CellRealization:
    """Sampled geometry around the tagged base station at the origin."""

    bs_positions: np.ndarray  # other base stations, shape (n_bs, 2)
    device_positions: np.ndarray  # shape (N, 2), sorted by distance
    device_distances: np.ndarray  # shape (N,), ascending
    retries: int = 0


@dataclass(frozen=True)
class SuccessModel:
    u: np.ndarray
    source: Literal["analytic", "monte_carlo", "fixed"] = "analytic"
    stderr: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        u = np.asarray(self.u, dtype=float)
        if u.ndim != 1 or u.size == 0:
            raise ConfigError("success vector must be a non-empty 1-D array")
        if np.any(u <= 0) or np.any(u > 1):
            raise ConfigError("success probabilities must lie in (0, 1]")
        object.__setattr__(self, "u", u)


# ---------------------------------------------------------------------------
# Geometry


def quantile_distances(density: float, n: int) -> np.ndarray:
    """Deterministic device distances at the mid-quantiles of the
    nearest-base-station distance law P(r > x) = exp(-density*pi*x^2)."""
    probs = (np.arange(1, n + 1) - 0.5) / n
    return np.sqrt(-np.log1p(-probs) / (density * math.pi))


def sample_cell(cfg: NetworkConfig, seed) -> CellRealization:
    rng = np.random.default_rng(seed)
    w = cfg.window
    expected = cfg.density * (2.0 * w) ** 2
    if expected < 20:
        raise ConfigError(
            f"simulation window too small: expected {expected:.1f} base stations, need >= 20"
        )

    if cfg.quantile_distances:
        r = quantile_distances(cfg.density, cfg.n_devices)
        ang = rng.uniform(0.0, 2.0 * math.pi, cfg.n_devices)
        pos = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        return CellRealization(np.empty((0, 2)), pos, r)

    retries = 0
    while True:
        n_bs = rng.poisson(expected)
        bs = rng.uniform(-w, w, size=(n_bs, 2))
        devices = _rejection_sample_cell(bs, w, cfg.n_devices, rng)
        if devices is not None:
            break
        retries += 1
    d = np.hypot(devices[:, 0], devices[:, 1])
    order = np.argsort(d, kind="stable")
    return CellRealization(bs, devices[order], d[order], retries)


def cell_polygon(bs: np.ndarray, w: float) -> np.ndarray:
    """Voronoi cell of the origin, clipped to the simulation window.

    Each base station b contributes the half-plane x.b <= |b|^2 / 2.
    """
    poly = np.array([[-w, -w], [w, -w], [w, w], [-w, w]], dtype=float)
    for b in bs:
        lim = 0.5 * float(b @ b)
        side = poly @ b - lim
        if np.all(side <= 0):
            continue
        out = []
        for j in range(len(poly)):
            p, q = poly[j], poly[(j + 1) % len(poly)]
            sp, sq = side[j], side[(j + 1) % len(poly)]
            if sp <= 0:
                out.append(p)
            if (sp < 0 < sq) or (sq < 0 < sp):
                out.append(p + (sp / (sp - sq)) * (q - p))
        poly = np.array(out)
    return poly


def _rejection_sample_cell(bs, w, n, rng):
    poly = cell_polygon(bs, w)
    lo, hi = poly.min(axis=0), poly.max(axis=0)
    accepted = []
    count = 0
    for _ in range(_REJECTION_BATCHES):
        cand = rng.uniform(lo, hi, size=(_REJECTION_BATCH, 2))
        d0 = np.einsum("ij,ij->i", cand, cand)
        inside = np.all(cand @ bs.T <= 0.5 * np.einsum("ij,ij->i", bs, bs), axis=1) if len(bs) else np.ones(len(cand), bool)
        inside &= d0 > 0
        pts = cand[inside]
        accepted.append(pts)
        count += len(pts)
        if count >= n:
            return np.concatenate(accepted)[:n]
    return None


# ---------------------------------------------------------------------------
# Analytic success probability


def _interference_integral(cfg: NetworkConfig, r: float, i: int) -> float:
    a = cfg.alpha
    s = cfg.theta * r**a
    c = INTENSITY_FACTOR * cfg.density * math.pi

    def f(x):
        if x == 0.0:
            return 0.0
        z = s * x ** (-a)
        blocked = -math.expm1(-i * math.log1p(z))
        return blocked * -math.expm1(-c * x * x) * x

    knee = s ** (1.0 / a)
    sat = 1.0 / math.sqrt(c)
    pts = sorted({min(knee, sat), max(knee, sat)})
    total = 0.0
    err = 0.0
    edges = [0.0, *pts]
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(f, lo, hi, epsabs=1e-10, epsrel=1e-10, limit=200)
        total += val
        err += e
    val, e = integrate.quad(f, edges[-1], np.inf, epsabs=1e-10, epsrel=1e-10, limit=200)
    total += val
    err += e
    if not math.isfinite(total) or err > 1e-8 * max(1.0, abs(total)):
        raise NumericalError(
            f"interference integral did not converge at r={r}, i={i}: residual {err:.3e}"
        )
    return total


def success_probability_analytic(cfg: NetworkConfig, r_k: float) -> float:
    """Success probability of a scheduled device at distance ``r_k`` with
    selection combining over ``cfg.attempts`` transmissions."""
    if not r_k > 0:
        raise ConfigError(f"distance must be > 0, got {r_k}")
    ell = cfg.attempts
    noise_term = cfg.theta * cfg.noise * r_k**cfg.alpha
    terms = []
    for i in range(1, ell + 1):
        expo = -i * noise_term
        if cfg.interference:
            expo -= 2.0 * math.pi * cfg.density * _interference_integral(cfg, r_k, i)
        terms.append(math.comb(ell, i) * (-1) ** (i + 1) * math.exp(expo))
    u = math.fsum(terms)
    biggest = max(abs(t) for t in terms)
    if u > 0 and biggest / u > 1e6:
        warnings.warn(
            f"alternating sum over {ell} attempts cancels {math.log10(biggest / u):.1f} digits",
            RuntimeWarning,
            stacklevel=2,
        )
    tol = 1e-9 * biggest
    if u > 1.0:
        if u - 1.0 > tol:
            raise NumericalError(f"success probability {u} exceeds 1")
        u = 1.0
    elif u < 0.0:
        if -u > tol:
            raise NumericalError(f"success probability {u} is negative")
        u = 0.0
    return u


def success_vector(cfg: NetworkConfig, distances: Sequence[float]) -> np.ndarray:
    return np.array([success_probability_analytic(cfg, float(r)) for r in distances])


def success_model(
    cfg: NetworkConfig,
    cell: CellRealization,
    source: str = "analytic",
    draws: int = 100_000,
    seed=0,
) -> SuccessModel:
    if source == "analytic":
        return SuccessModel(success_vector(cfg, cell.device_distances), "analytic")
    if source == "monte_carlo":
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        ss = root.spawn(len(cell.device_distances))
        est = [success_probability_mc(cfg, float(r), draws, s) for r, s in zip(cell.device_distances, ss)]
        u, se = map(np.array, zip(*est))
        return SuccessModel(np.clip(u, 1.0 / draws, 1.0), "monte_carlo", se)
    raise ConfigError(f"unknown success source {source!r}")


# ---------------------------------------------------------------------------
# Monte-Carlo simulation


def _inner_radius(cfg: NetworkConfig, r_max: float, tail_tol: float) -> float:
    """Radius inside which interferers are drawn explicitly.

    Beyond it the interference is replaced by its mean. The resulting bias is
    bounded by 0.5 * ell^2 * (theta r^alpha)^2 * Var(far interference), which
    is kept below ``tail_tol``. The radius also puts the intensity well into
    its saturated regime so the far field is homogeneous.
    """
    a = cfg.alpha
    ell = cfg.attempts
    s = cfg.theta * r_max**a
    c = INTENSITY_FACTOR * cfg.density * math.pi
    var_coef = 4.0 * math.pi * cfg.density / (2.0 * a - 2.0)
    r_var = (0.5 * ell**2 * s**2 * var_coef / tail_tol) ** (1.0 / (2.0 * a - 2.0))
    r_sat = math.sqrt(40.0 / c)
    return max(r_var, r_sat, 2.0 * r_max)


def simulate_successes(
    cfg: NetworkConfig,
    distances: np.ndarray,
    rng: np.random.Generator,
    tail_tol: float = 1e-5,
) -> np.ndarray:
    """One aggregation step per entry of ``distances``: sample interferers,
    redraw Rayleigh fading for each of the ``attempts`` transmissions, and
    report whether the best SINR beats the threshold."""
    distances = np.asarray(distances, dtype=float)
    n = distances.size
    ell = cfg.attempts
    a = cfg.alpha
    interference = np.zeros((n, ell))
    if cfg.interference and n:
        big_r = _inner_radius(cfg, float(distances.max()), tail_tol)
        c = INTENSITY_FACTOR * cfg.density * math.pi
        counts = rng.poisson(cfg.density * math.pi * big_r**2, size=n)
        total = int(counts.sum())
        rho2 = big_r**2 * rng.random(total)
        keep = rng.random(total) < -np.expm1(-c * rho2)
        owner = np.repeat(np.arange(n), counts)[keep]
        gain = rho2[keep] ** (-a / 2.0)
        fading = rng.exponential(size=(owner.size, ell))
        for i in range(ell):
            interference[:, i] = np.bincount(owner, weights=fading[:, i] * gain, minlength=n)
        interference += 2.0 * math.pi * cfg.density * big_r ** (2.0 - a) / (a - 2.0)
    signal = rng.exponential(size=(n, ell)) * distances[:, None] ** (-a)
    with np.errstate(divide="ignore"):
        sinr = signal / (interference + cfg.noise)  # inf when noise and interference are both off
    return np.any(sinr > cfg.theta, axis=1)


def success_probability_mc(cfg: NetworkConfig, r_k: float, draws: int, seed) -> tuple[float, float]:
    """Empirical success probability and its standard error.

    Draws are processed in fixed-size chunks, each with its own spawned seed,
    so the estimate does not depend on how the work is scheduled.
    """
    if draws < MIN_MC_DRAWS:
        raise ConfigError(f"need at least {MIN_MC_DRAWS} draws, got {draws}")
    if not r_k > 0:
        raise ConfigError(f"distance must be > 0, got {r_k}")
    n_chunks = -(-draws // _MC_CHUNK)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = root.spawn(n_chunks)
    hits = 0
    remaining = draws
    for s in seeds:
        m = min(_MC_CHUNK, remaining)
        hits += int(simulate_successes(cfg, np.full(m, r_k), np.random.default_rng(s)).sum())
        remaining -= m
    p = hits / draws
    return p, math.sqrt(p * (1.0 - p) / draws)


def draw_success_indicators(
    cfg: NetworkConfig,
    cell: CellRealization,
    scheduled: Sequence[int | None],
    seed,
) -> list[bool | None]:
    """Success flag per resource block for one aggregation step.

    ``scheduled`` holds a device index or ``None`` for each of the M blocks.
    Every occupied block gets its own interferer realization, shared by the
    attempts on that block.
    """
    if len(scheduled) != cfg.n_rbs:
        raise ConfigError(f"expected {cfg.n_rbs} schedule entries, got {len(scheduled)}")
    occupied = [(m, k) for m, k in enumerate(scheduled) if k is not None]
    out: list[bool | None] = [None] * len(scheduled)
    if not occupied:
        return out
    n_dev = len(cell.device_distances)
    for _, k in occupied:
        if not 0 <= k < n_dev:
            raise IndexError(f"device index {k} out of range for {n_dev} devices")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    r = cell.device_distances[[k for _, k in occupied]]
    flags = simulate_successes(cfg, r, rng)
    for (m, _), ok in zip(occupied, flags):
        out[m] = bool(ok)
    return out
