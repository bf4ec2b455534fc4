"""TOML experiment configuration.

Every key is optional; omitted keys fall back to the defaults below, which
describe the MNIST experiment (lambda = 1e-3, N = 100, M = 20, noise 1e-4,
alpha = 4, theta = -15 dB, batch 64, eta0 = 1, ell = 2, E = 1).

Schema::

    seed = 0                  # base seed; trial i uses seed + i
    trials = 1
    output_dir = "results"    # overridden by $FEDCELL_OUTPUT_DIR
    rule = "unbiased"         # unbiased | biased_fraction | biased_weighted
    centralized = false       # also run the full-batch GD benchmark

    [network]
    density = 1e-3
    n_devices = 100
    n_rbs = 20
    noise = 1e-4
    alpha = 4.0
    theta_db = -15.0
    attempts = 2
    interference = true
    quantile_distances = false
    success = "analytic"      # analytic | monte_carlo | fixed (U used for reweighting)
    fixed_u = []              # per-device U when success = "fixed"
    mc_draws = 100000
    channel = "geometry"      # geometry (simulate SINR) | bernoulli (draw from U)

    [dataset]
    kind = "mnist"            # mnist | synthetic | cache
    path = ""                 # IDX directory for mnist, file for cache
    alpha_tilde = 1.0
    beta_tilde = 1.0
    total_samples = 0         # 0 means 4 * min_samples * n_devices
    min_samples = 50
    shard_floor = 100

    [loss]
    family = "mlp"            # mlp | logistic | quadratic
    l2 = 1e-4
    hidden = [300, 300]
    clip_norm = 0.0           # 0 disables clipping

    [policy]
    scheme = "I"              # I | II
    selection = "uniform"     # uniform | optimal | weights (q_hat = p)

    [train]
    rounds = 100
    local_steps = 1
    batch_size = 64           # 0 means full local batch
    lr = "practical"          # practical | theory
    eta0 = 1.0
    eval_every = 1
    eval_samples = 0          # 0 evaluates on all training samples

    [bound]
    e_range = [1, 50]         # inclusive integer range scanned
    mode = "fixed_K"          # fixed_K | fixed_T
    k_rounds = 100
    sweep = "E"               # E | K
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .flcore import RULES, PracticalLR, TheoryLR, TrainConfig
from .model import LossSpec
from .wireless import NetworkConfig

OUTPUT_ENV = "FEDCELL_OUTPUT_DIR"
MNIST_ENV = "FEDCELL_MNIST_DIR"


@dataclass(frozen=True)
class NetworkSection:
    density: float = 1e-3
    n_devices: int = 100
    n_rbs: int = 20
    noise: float = 1e-4
    alpha: float = 4.0
    theta_db: float = -15.0
    attempts: int = 2
    interference: bool = True
    quantile_distances: bool = False
    success: str = "analytic"
    fixed_u: tuple[float, ...] = ()
    mc_draws: int = 100_000
    channel: str = "geometry"

    def network(self) -> NetworkConfig:
        return NetworkConfig.with_theta_db(
            self.theta_db,
            density=self.density,
            n_devices=self.n_devices,
            n_rbs=self.n_rbs,
            noise=self.noise,
            alpha=self.alpha,
            attempts=self.attempts,
            interference=self.interference,
            quantile_distances=self.quantile_distances,
        )


@dataclass(frozen=True)
class DatasetSection:
    kind: str = "mnist"
    path: str = ""
    alpha_tilde: float = 1.0
    beta_tilde: float = 1.0
    total_samples: int = 0
    min_samples: int = 50
    shard_floor: int = 100

    def mnist_dir(self) -> Path:
        return Path(self.path or os.environ.get(MNIST_ENV, "data/mnist"))


@dataclass(frozen=True)
class LossSection:
    family: str = "mlp"
    l2: float = 1e-4
    hidden: tuple[int, ...] = (300, 300)
    clip_norm: float = 0.0


@dataclass(frozen=True)
class PolicySection:
    scheme: str = "I"
    selection: str = "uniform"


@dataclass(frozen=True)
class TrainSection:
    rounds: int = 100
    local_steps: int = 1
    batch_size: int = 64
    lr: str = "practical"
    eta0: float = 1.0
    eval_every: int = 1
    eval_samples: int = 0


@dataclass(frozen=True)
class BoundSection:
    e_range: tuple[int, int] = (1, 50)
    mode: str = "fixed_K"
    k_rounds: int = 100
    sweep: str = "E"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    trials: int = 1
    output_dir: str = "results"
    rule: str = "unbiased"
    centralized: bool = False
    network: NetworkSection = field(default_factory=NetworkSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    loss: LossSection = field(default_factory=LossSection)
    policy: PolicySection = field(default_factory=PolicySection)
    train: TrainSection = field(default_factory=TrainSection)
    bound: BoundSection = field(default_factory=BoundSection)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.dataset.kind not in ("mnist", "synthetic", "cache"):
            raise ConfigError(f"unknown dataset kind {self.dataset.kind!r}")
        if self.dataset.kind == "cache" and not self.dataset.path:
            raise ConfigError("dataset.path is required for kind = 'cache'")
        if self.policy.scheme not in ("I", "II"):
            raise ConfigError(f"unknown scheme {self.policy.scheme!r}")
        if self.policy.selection not in ("uniform", "optimal", "weights"):
            raise ConfigError(f"unknown selection {self.policy.selection!r}")
        if self.policy.scheme == "I" and self.policy.selection != "uniform":
            raise ConfigError("scheme I only supports uniform selection")
        if self.network.success not in ("analytic", "monte_carlo", "fixed"):
            raise ConfigError(f"unknown success model {self.network.success!r}")
        if self.network.success == "fixed":
            if len(self.network.fixed_u) != self.network.n_devices:
                raise ConfigError("network.fixed_u needs one entry per device")
            if self.network.channel != "bernoulli":
                raise ConfigError("a fixed success vector needs channel = 'bernoulli'")
        if self.network.channel not in ("geometry", "bernoulli"):
            raise ConfigError(f"unknown channel {self.network.channel!r}")
        if self.train.lr not in ("practical", "theory"):
            raise ConfigError(f"unknown learning rate {self.train.lr!r}")
        if self.train.lr == "theory" and self.loss.family == "mlp":
            raise ConfigError("the theory learning rate needs a strongly convex loss (logistic or quadratic)")
        if self.bound.mode not in ("fixed_K", "fixed_T"):
            raise ConfigError(f"unknown bound mode {self.bound.mode!r}")
        if self.bound.sweep not in ("E", "K"):
            raise ConfigError(f"unknown bound sweep {self.bound.sweep!r}")
        lo, hi = self.bound.e_range
        if not 1 <= lo <= hi:
            raise ConfigError("bound.e_range must satisfy 1 <= lo <= hi")
        # construct once so range errors surface at load time
        self.network.network()
        self.loss_spec(60)
        self.train_config(0)

    @property
    def out_path(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV) or self.output_dir)

    def loss_spec(self, n_features: int) -> LossSpec:
        return LossSpec(
            family=self.loss.family,
            n_features=n_features,
            l2=self.loss.l2,
            hidden=self.loss.hidden,
            clip_norm=self.loss.clip_norm or None,
        )

    def train_config(self, trial: int, lr: PracticalLR | TheoryLR | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            rounds=t.rounds,
            local_steps=t.local_steps,
            batch_size=t.batch_size or None,
            lr=lr if lr is not None else PracticalLR(t.eta0),
            seed=self.seed + trial,
            eval_every=t.eval_every,
            eval_samples=t.eval_samples or None,
        )


_SECTIONS = {
    "network": NetworkSection,
    "dataset": DatasetSection,
    "loss": LossSection,
    "policy": PolicySection,
    "train": TrainSection,
    "bound": BoundSection,
}


def _build(cls, table: dict[str, Any], where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(table) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    values = {}
    for key, val in table.items():
        if isinstance(val, list):
            val = tuple(val)
        values[key] = val
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    top = {}
    for key, val in data.items():
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"[{key}] must be a table")
            top[key] = _build(_SECTIONS[key], val, key)
        else:
            top[key] = val
    return _build(ExperimentConfig, top, "top level")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)
