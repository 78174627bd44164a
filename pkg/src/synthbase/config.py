"""Run configuration: defaults for every pipeline stage, file loading, seeds.

All defaults mirror the documented experiment protocol (split fractions,
ridge penalties, lag counts, MLP hyperparameters).  Battery parameters and
the congestion calendar are artifact-defined defaults; they are flagged as
such in the README.
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Malformed or unknown configuration content."""


@dataclasses.dataclass
class SplitConfig:
    train: float = 0.6
    val: float = 0.1
    test: float = 0.3


@dataclasses.dataclass
class IngestConfig:
    step_minutes: int = 30
    pv_csv: str | None = None


@dataclasses.dataclass
class ScmConfig:
    # Ridge penalties: basic donor-only control group vs. augmented designs.
    lambda_basic: float = 1350.0
    lambda_augmented: float = 450.0
    # The simplex-constrained variant has no documented penalty of its own;
    # it reuses the basic value.
    lambda_classic: float = 1350.0


@dataclasses.dataclass
class AugmentConfig:
    treated_lag_count: int = 336
    donor_lag_search_max: int | None = None  # defaults to treated_lag_count
    exogenous_feature_count: int = 7


@dataclasses.dataclass
class MlpConfig:
    hidden_sizes: tuple[int, int] = (64, 64)
    learning_rate: float = 5e-4
    max_epochs: int = 2000
    patience: int = 10
    batch_size: int = 256
    weight_decay: float = 1e-4
    restarts: int = 3


@dataclasses.dataclass
class BessConfig:
    s_max: float = 5.0
    eta: float = 0.95
    soc_min: float = 0.0
    soc_max: float = 10.0
    soc_init: float = 5.0
    n_baseline_days: int = 10
    steps_per_day: int = 48
    rebate_rate: float = 0.0
    action_penalty: float = 1e-7


@dataclasses.dataclass
class BenchmarkConfig:
    mavg_window_days: int = 10
    mid_x: int = 5
    mid_y: int = 10
    kmeans_k: int = 8
    lasso_alpha: float | None = None  # None: pick on the validation split
    lasso_alpha_grid_size: int = 10


@dataclasses.dataclass
class FactorLabConfig:
    n_trials: int = 100_000
    pre_period_len: int = 1_000_000


@dataclasses.dataclass
class RunConfig:
    split: SplitConfig = dataclasses.field(default_factory=SplitConfig)
    ingest: IngestConfig = dataclasses.field(default_factory=IngestConfig)
    scm: ScmConfig = dataclasses.field(default_factory=ScmConfig)
    augment: AugmentConfig = dataclasses.field(default_factory=AugmentConfig)
    mlp: MlpConfig = dataclasses.field(default_factory=MlpConfig)
    bess: BessConfig = dataclasses.field(default_factory=BessConfig)
    benchmark: BenchmarkConfig = dataclasses.field(default_factory=BenchmarkConfig)
    factor_lab: FactorLabConfig = dataclasses.field(default_factory=FactorLabConfig)
    seed: int = 0
    jobs: int = 1


def default_seed() -> int:
    """Global seed, overridable through the SYNTHBASE_SEED environment variable."""
    raw = os.environ.get("SYNTHBASE_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"SYNTHBASE_SEED must be an integer, got {raw!r}") from exc


def _apply_section(obj, data: dict, path: str) -> None:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path}.{key}" if path else f"unknown config key {key}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}.{key} must be a mapping")
            _apply_section(current, value, f"{path}.{key}" if path else key)
        else:
            if isinstance(current, tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(obj, key, value)


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML/JSON config file onto the defaults; unknown keys are rejected."""
    cfg = RunConfig(seed=default_seed())
    if path is None:
        return cfg
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return cfg
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    _apply_section(cfg, data, "")
    return cfg
