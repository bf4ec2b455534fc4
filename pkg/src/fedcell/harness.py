"""Experiment orchestration and CSV artifacts.

Per-round files share one column order::

    round,t,scheme,rule,E,ell,global_loss,train_acc,test_acc,n_success

Missing accuracies are written as empty fields. Floats use ``repr`` so a
re-run with the same seed reproduces files byte for byte.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import bounds as bd
from . import datasets as ds
from . import flcore as fl
from . import scheduling as sch
from . import wireless as wl
from .config import ExperimentConfig
from .errors import ConfigError, DataFormatError, NumericalError
from .model import init_params, strong_convexity_constants

ROUND_COLUMNS = ("round", "t", "scheme", "rule", "E", "ell", "global_loss", "train_acc", "test_acc", "n_success")
SUMMARY_COLUMNS = (
    "rule", "trials", "initial_loss", "final_loss_mean", "final_loss_std",
    "final_train_acc_mean", "final_test_acc_mean",
)
DIAG_COLUMNS = ("k", "r_k", "U_analytic", "U_mc", "stderr")
SCHEDULE_COLUMNS = ("k", "p_k", "U_k", "q_k", "q_hat_k")

# seed offsets so geometry and Monte-Carlo streams never collide with training
_GEOMETRY, _MC = 101, 102


# ---------------------------------------------------------------------------
# CSV helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if not math.isfinite(v):
            raise NumericalError(f"refusing to write non-finite value {v}")
        return repr(float(v))
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            if len(row) != len(columns):
                raise ValueError(f"row has {len(row)} fields, schema has {len(columns)}")
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Wiring


def load_dataset(cfg: ExperimentConfig) -> ds.FederatedDataset:
    n = cfg.network.n_devices
    d = cfg.dataset
    if d.kind == "synthetic":
        return ds.generate_synthetic(
            n, d.alpha_tilde, d.beta_tilde, seed=cfg.seed,
            total_samples=d.total_samples or None, min_samples=d.min_samples,
        )
    if d.kind == "cache":
        fd = ds.load_cache(d.path)
    else:
        root = d.mnist_dir()
        if not (root / "train-images-idx3-ubyte").exists():
            raise DataFormatError(f"MNIST IDX files not found under {root}")
        (x, y), test = ds.load_mnist_dir(root)
        fd = ds.partition_mnist_noniid(x, y, n, seed=cfg.seed, test=test, shard_floor=d.shard_floor)
    if fd.n_devices != n:
        raise ConfigError(f"dataset has {fd.n_devices} devices, network expects {n}")
    return fd


@dataclass(frozen=True)
class TrialSetup:
    network: wl.NetworkConfig
    cell: wl.CellRealization
    success: wl.SuccessModel
    policy: fl.SamplingPolicy
    channel: fl.SuccessSource


def success_for(cfg: ExperimentConfig, net: wl.NetworkConfig, cell: wl.CellRealization, trial: int) -> wl.SuccessModel:
    if cfg.network.success == "fixed":
        return wl.SuccessModel(np.array(cfg.network.fixed_u, dtype=float), "fixed")
    return wl.success_model(net, cell, cfg.network.success, cfg.network.mc_draws, seed=[cfg.seed + trial, _MC])


def policy_for(cfg: ExperimentConfig, p: np.ndarray, u: np.ndarray) -> fl.SamplingPolicy:
    sel = cfg.policy.selection
    if cfg.policy.scheme == "I" or sel == "uniform":
        return fl.SamplingPolicy.uniform(cfg.policy.scheme, len(p))
    if sel == "weights":
        return fl.SamplingPolicy("II", p / p.sum())
    q_star, _ = sch.solve_optimal_q(sch.SchedulingProblem(p, u, cfg.network.n_rbs))
    return sch.to_sampling_policy(q_star, cfg.network.n_rbs)


def setup_trial(cfg: ExperimentConfig, dataset: ds.FederatedDataset, trial: int) -> TrialSetup:
    net = cfg.network.network()
    cell = wl.sample_cell(net, [cfg.seed + trial, _GEOMETRY])
    success = success_for(cfg, net, cell, trial)
    policy = policy_for(cfg, dataset.p, success.u)
    if cfg.network.channel == "geometry":
        channel = fl.ChannelSuccess(net, cell, success.u)
    else:
        channel = fl.FixedSuccess(success.u)
    return TrialSetup(net, cell, success, policy, channel)


def learning_rate(cfg: ExperimentConfig, spec, dataset):
    if cfg.train.lr == "practical":
        return fl.PracticalLR(cfg.train.eta0)
    mu, L = strong_convexity_constants(spec, dataset)
    return fl.TheoryLR.from_constants(mu, L, cfg.train.local_steps)


def _round_rows(traces, scheme, rule, E, ell):
    for tr in traces:
        yield (tr.round, tr.t, scheme, rule, E, ell, tr.global_loss, tr.train_acc, tr.test_acc, tr.n_success)


def _mean_rows(per_trial: list[list[fl.RoundTrace]], scheme, rule, E, ell):
    for group in zip(*per_trial):
        def avg(attr):
            vals = [getattr(tr, attr) for tr in group]
            return None if any(v is None for v in vals) else float(np.mean(vals))

        first = group[0]
        yield (
            first.round, first.t, scheme, rule, E, ell,
            avg("global_loss"), avg("train_acc"), avg("test_acc"),
            float(np.mean([tr.n_success for tr in group])),
        )


@dataclass
class RuleResult:
    rule: str
    initial_loss: float
    final_losses: list[float]
    final_train_acc: list[float | None]
    final_test_acc: list[float | None]
    final_w: list[np.ndarray]
    paths: list[Path]


def _run_rule(cfg, dataset, spec, rule, setups, out: Path, tag: str) -> RuleResult:
    E = cfg.train.local_steps
    ell = cfg.network.attempts
    scheme = cfg.policy.scheme
    lr = learning_rate(cfg, spec, dataset)
    per_trial = []
    finals = []
    paths = []
    init = []
    for trial, setup in enumerate(setups):
        train = cfg.train_config(trial, lr)
        evaluator = fl.Evaluator.build(dataset, spec, train.eval_samples, cfg.seed)
        w0 = init_params(spec, cfg.seed + trial)
        init.append(evaluator.global_loss(w0))
        w, traces = fl.run_federated(
            dataset, spec, setup.policy, rule, setup.channel, cfg.network.n_rbs, train, w0=w0, evaluator=evaluator,
        )
        per_trial.append(traces)
        finals.append(w)
        paths.append(write_csv(out / f"{tag}_trial{trial}.csv", ROUND_COLUMNS, _round_rows(traces, scheme, rule, E, ell)))
    paths.append(write_csv(out / f"{tag}_mean.csv", ROUND_COLUMNS, _mean_rows(per_trial, scheme, rule, E, ell)))
    last = [tr[-1] for tr in per_trial if tr]
    return RuleResult(
        rule,
        float(np.mean(init)),
        [t.global_loss for t in last],
        [t.train_acc for t in last],
        [t.test_acc for t in last],
        finals,
        paths,
    )


def _context(cfg: ExperimentConfig):
    dataset = load_dataset(cfg)
    spec = cfg.loss_spec(dataset.n_features)
    setups = [setup_trial(cfg, dataset, i) for i in range(cfg.trials)]
    return dataset, spec, setups


def _centralized(cfg, dataset, spec, out: Path) -> Path:
    w0 = init_params(spec, cfg.seed)
    _, traces = fl.run_centralized_gd(dataset, spec, fl.PracticalLR(cfg.train.eta0), cfg.train.rounds, w0)
    n = dataset.n_devices
    rows = [
        (tr.round, tr.t, "full", "centralized", 1, 0, tr.global_loss, tr.train_acc, tr.test_acc, n)
        for tr in traces
    ]
    return write_csv(out / "centralized.csv", ROUND_COLUMNS, rows)


# ---------------------------------------------------------------------------
# Subcommands


def run_experiment(cfg: ExperimentConfig) -> list[Path]:
    """Train with the configured rule over all trials; returns the written
    paths (per-trial CSVs, the mean CSV, optionally the benchmark)."""
    out = cfg.out_path
    dataset, spec, setups = _context(cfg)
    res = _run_rule(cfg, dataset, spec, cfg.rule, setups, out, f"run_{cfg.rule}")
    paths = list(res.paths)
    if cfg.centralized:
        paths.append(_centralized(cfg, dataset, spec, out))
    return paths


def compare_rules(cfg: ExperimentConfig, rules: Sequence[str] = fl.RULES) -> tuple[Path, list[RuleResult]]:
    """Run each aggregation rule on identical geometry, schedules and channel
    draws, and write a summary with final loss/accuracy per rule."""
    out = cfg.out_path
    dataset, spec, setups = _context(cfg)
    results = []
    for rule in rules:
        if rule not in fl.RULES:
            raise ConfigError(f"unknown rule {rule!r}")
        results.append(_run_rule(cfg, dataset, spec, rule, setups, out, f"compare_{rule}"))

    def mean_or_none(vals):
        return None if any(v is None for v in vals) or not vals else float(np.mean(vals))

    rows = [
        (
            r.rule, cfg.trials, r.initial_loss, float(np.mean(r.final_losses)), float(np.std(r.final_losses)),
            mean_or_none(r.final_train_acc), mean_or_none(r.final_test_acc),
        )
        for r in results
    ]
    return write_csv(out / "compare_summary.csv", SUMMARY_COLUMNS, rows), results


def diag_success(cfg: ExperimentConfig, draws: int | None = None) -> Path:
    """Analytic versus simulated success probability for every device of
    the first trial's cell."""
    net = cfg.network.network()
    cell = wl.sample_cell(net, [cfg.seed, _GEOMETRY])
    draws = draws or cfg.network.mc_draws
    seeds = np.random.SeedSequence([cfg.seed, _MC]).spawn(len(cell.device_distances))
    rows = []
    for k, (r, s) in enumerate(zip(cell.device_distances, seeds)):
        ua = wl.success_probability_analytic(net, float(r))
        um, se = wl.success_probability_mc(net, float(r), draws, s)
        rows.append((k, float(r), ua, um, se))
    return write_csv(cfg.out_path / f"diag_success_ell{net.attempts}.csv", DIAG_COLUMNS, rows)


@dataclass(frozen=True)
class ScheduleReport:
    path: Path
    summary_path: Path
    objective_uniform: float
    objective_optimal: float


def schedule(cfg: ExperimentConfig) -> ScheduleReport:
    dataset = load_dataset(cfg)
    net = cfg.network.network()
    cell = wl.sample_cell(net, [cfg.seed, _GEOMETRY])
    u = success_for(cfg, net, cell, 0).u
    p = dataset.p
    prob = sch.SchedulingProblem(p, u, net.n_rbs)
    q_star, obj_opt = sch.solve_optimal_q(prob)
    q_uni = np.full(len(p), net.n_rbs / len(p))
    obj_uni = sch.objective(prob, q_uni)
    q_hat = sch.to_sampling_policy(q_star, net.n_rbs).probs
    path = write_csv(
        cfg.out_path / "schedule.csv", SCHEDULE_COLUMNS,
        [(k, p[k], u[k], q_star[k], q_hat[k]) for k in range(len(p))],
    )
    m = net.n_rbs
    summary = [
        ("objective_uniform", obj_uni),
        ("objective_optimal", obj_opt),
        ("B_scheme_I_uniform", bd.compute_B(p, q_uni, u, m, "I")),
        ("B_scheme_II_uniform", bd.compute_B(p, q_uni, u, m, "II")),
        ("B_scheme_II_optimal", bd.compute_B(p, q_star, u, m, "II")),
    ]
    spath = write_csv(cfg.out_path / "schedule_summary.csv", ("quantity", "value"), summary)
    return ScheduleReport(path, spath, obj_uni, obj_opt)


def bound_curve(cfg: ExperimentConfig) -> tuple[Path, Path]:
    """Estimate the analytic constants on the configured dataset and write
    the round-indexed bound as a function of E (or K)."""
    if cfg.loss.family == "mlp":
        raise ConfigError("bound curves need a strongly convex loss (logistic or quadratic)")
    dataset = load_dataset(cfg)
    spec = cfg.loss_spec(dataset.n_features)
    net = cfg.network.network()
    cell = wl.sample_cell(net, [cfg.seed, _GEOMETRY])
    u = success_for(cfg, net, cell, 0).u
    policy = policy_for(cfg, dataset.p, u)
    q = policy.q(dataset.n_devices, net.n_rbs)
    w0 = init_params(spec)
    const = bd.estimate_constants(spec, dataset, cfg.train.batch_size or None, w0)
    base = bd.BoundInputs(
        mu=const.mu, L=const.L, sigma_sq=const.sigma_sq, gamma_cap=const.gamma_cap, g=const.g,
        p=dataset.p, q=q, u=u, m=net.n_rbs, e_steps=cfg.train.local_steps, k_rounds=cfg.bound.k_rounds,
        w0_dist_sq=float(np.sum((w0 - const.w_star) ** 2)),
    )
    scheme = cfg.policy.scheme
    lo, hi = cfg.bound.e_range
    if cfg.bound.sweep == "E":
        search = bd.optimal_E_search(base, range(lo, hi + 1), scheme, cfg.bound.mode)
        rows = search.values
    else:
        rows = [(k, bd.round_indexed_bound(base.with_(k_rounds=k), scheme)) for k in range(lo, hi + 1)]
    curve = write_csv(cfg.out_path / f"bound_{cfg.bound.sweep}.csv", (cfg.bound.sweep, "bound"), rows)
    consts = [
        ("mu", const.mu, 0), ("L", const.L, 0), ("Gamma", const.gamma_cap, 1), ("G", const.g, 1),
        ("sigma_sq_max", float(const.sigma_sq.max()), 1), ("F_star", const.f_star, 0),
        ("w0_dist_sq", base.w0_dist_sq, 0), ("B", bd.compute_B(base.p, q, u, net.n_rbs, scheme), 0),
    ]
    cpath = write_csv(cfg.out_path / "bound_constants.csv", ("name", "value", "approximate"), consts)
    return curve, cpath
