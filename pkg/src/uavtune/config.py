"""Search domain, runtime configuration and manifest hashing.

The tunable parameter triple is ``(m, horizon, delta_opt)``: number of
polynomial segments, planning horizon in seconds and wall-clock budget of
the per-UAV trajectory optimizer in seconds.  All Gaussian-process code
works on coordinates normalized to the unit cube over the domain bounds;
only the black-box boundary sees raw units.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

M_VALUES: tuple[int, ...] = (2, 3, 4, 5, 6, 7)
HORIZON_BOUNDS: tuple[float, float] = (0.3, 2.0)
DELTA_OPT_BOUNDS: tuple[float, float] = (0.01, 0.2)

DETERMINISTIC_ENV_VAR = "UAVTUNE_DETERMINISTIC"

# Reference tuned parameter tables shipped with the repo (average strategy
# row plus one row per task for the single-task strategy).
REFERENCE_AVERAGE_THETA: tuple[int, float, float] = (3, 1.058, 0.125)
REFERENCE_SINGLE_TASK_THETAS: tuple[tuple[int, float, float], ...] = (
    (3, 1.079, 0.071),
    (4, 1.099, 0.153),
    (4, 0.776, 0.072),
    (4, 0.798, 0.075),
    (4, 0.776, 0.076),
    (4, 1.175, 0.025),
)


class ConfigError(ValueError):
    """Raised for invalid configuration files or parameter values."""


@dataclass(frozen=True)
class ThetaConfig:
    """One tunable configuration: segments, horizon [s], optimizer budget [s]."""

    m: int
    horizon: float
    delta_opt: float

    def __post_init__(self):
        if self.m not in M_VALUES:
            raise ConfigError(f"m={self.m} not in {M_VALUES}")
        lo, hi = HORIZON_BOUNDS
        if not lo <= self.horizon <= hi:
            raise ConfigError(f"horizon={self.horizon} outside [{lo}, {hi}]")
        lo, hi = DELTA_OPT_BOUNDS
        if not lo <= self.delta_opt <= hi:
            raise ConfigError(f"delta_opt={self.delta_opt} outside [{lo}, {hi}]")

    def as_tuple(self) -> tuple[int, float, float]:
        return (self.m, self.horizon, self.delta_opt)

    @classmethod
    def from_tuple(cls, t) -> "ThetaConfig":
        return cls(m=int(t[0]), horizon=float(t[1]), delta_opt=float(t[2]))


class ThetaDomain:
    """Maps between raw parameter triples and unit-cube coordinates.

    Column order is ``(m, horizon, delta_opt)``.  ``m`` is relaxed to a
    real when normalized; :meth:`to_theta` snaps it back to the nearest
    admissible integer.
    """

    m_values = M_VALUES
    lower = np.array([M_VALUES[0], HORIZON_BOUNDS[0], DELTA_OPT_BOUNDS[0]])
    upper = np.array([M_VALUES[-1], HORIZON_BOUNDS[1], DELTA_OPT_BOUNDS[1]])

    @classmethod
    def normalize(cls, raw: np.ndarray) -> np.ndarray:
        """Raw (N, 3) triples -> unit-cube coordinates."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        return (raw - cls.lower) / (cls.upper - cls.lower)

    @classmethod
    def denormalize(cls, unit: np.ndarray) -> np.ndarray:
        unit = np.atleast_2d(np.asarray(unit, dtype=float))
        return cls.lower + unit * (cls.upper - cls.lower)

    @classmethod
    def theta_to_unit(cls, theta: ThetaConfig) -> np.ndarray:
        return cls.normalize(np.array([theta.as_tuple()]))[0]

    @classmethod
    def to_theta(cls, raw: np.ndarray) -> ThetaConfig:
        m = int(min(cls.m_values, key=lambda v: abs(v - raw[0])))
        horizon = float(np.clip(raw[1], *HORIZON_BOUNDS))
        delta = float(np.clip(raw[2], *DELTA_OPT_BOUNDS))
        return ThetaConfig(m=m, horizon=horizon, delta_opt=delta)

    @classmethod
    def unit_to_theta(cls, unit: np.ndarray) -> ThetaConfig:
        return cls.to_theta(cls.denormalize(unit)[0])


def deterministic_iterations(config_value: int | None = None) -> int | None:
    """Resolve deterministic test mode: pinned planner iteration count or None.

    The environment variable wins over the config value so test harnesses
    can force the mode externally.  Accepted values: "" / "0" / "false"
    (off), "1" / "true" (default pin of 3 iterations) or an integer > 1.
    """
    raw = os.environ.get(DETERMINISTIC_ENV_VAR, "").strip().lower()
    if raw in ("", "0", "false", "no"):
        return config_value
    if raw in ("1", "true", "yes"):
        return config_value if config_value else 3
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{DETERMINISTIC_ENV_VAR}={raw!r} is not an integer flag")


# ---------------------------------------------------------------------------
# Run configuration files
# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, dict[str, Any]] = {
    "campaign": {
        "strategy": "average",          # average | single_task
        "n_max": 350,
        "init_points_per_task": 18,
        "repeats_per_eval": 3,
        "seed": 0,
        "n_tasks": 6,
        "penalty_margin_frac": 0.1,
        "penalty_fallback": -1000.0,
        "refit_every": 25,
        "fit_restarts": 8,
        "stall_iterations": 50,
        "stall_tol": 1.0e-3,
        "budget_unit": "evaluations",   # evaluations | iterations
        "beta_delta": 0.1,
        "beta_cap": 9.0,
        "acq_candidates": 1024,
        "coreg_rank": 2,
        "force_identity_icm": False,
    },
    "limits": {
        "v_max": 5.0,
        "a_max": 10.0,
        "d_min": 0.6,
    },
    "planner": {
        "rho": 100.0,
        "degree": 5,
        "collocation_per_segment": 4,
        "distance_inflation": 1.4,
        "terminal_rest_weight": 1.0,
        "deterministic_iterations": None,
    },
    "sim": {
        "timeout": 60.0,
        "arrival_pos_tol": 0.1,
        "arrival_speed_tol": 0.05,
        "replan_floor": 0.05,
        "check_dt": 0.01,
        "altitude": 1.5,
        "fail_aggregation": "any",      # any | mean_of_successes
    },
    "evaluation": {
        "swarm_sizes": [2, 4, 6, 8, 10, 12],
        "scenarios": 3,
        "runs": 5,
        "radius": 10.0,
        "seed": 0,
    },
}

_VALID_STRATEGIES = ("average", "single_task")


def default_config() -> dict[str, Any]:
    return json.loads(json.dumps(_DEFAULTS))


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section {path + key!r} must be a mapping")
            out[key] = _merge(base[key], value, path=f"{path}{key}.")
        else:
            out[key] = value
    return out


def validate_config(cfg: dict[str, Any]) -> list[str]:
    """Return a list of human-readable problems; empty means valid."""
    errors = []
    camp = cfg.get("campaign", {})
    if camp.get("strategy") not in _VALID_STRATEGIES:
        errors.append(f"campaign.strategy must be one of {_VALID_STRATEGIES}")
    for key in ("n_max", "init_points_per_task", "repeats_per_eval", "n_tasks"):
        if not isinstance(camp.get(key), int) or camp.get(key, 0) < 1:
            errors.append(f"campaign.{key} must be a positive integer")
    if camp.get("budget_unit") not in ("evaluations", "iterations"):
        errors.append("campaign.budget_unit must be 'evaluations' or 'iterations'")
    lim = cfg.get("limits", {})
    for key in ("v_max", "a_max", "d_min"):
        if not (isinstance(lim.get(key), (int, float)) and lim.get(key, 0) > 0):
            errors.append(f"limits.{key} must be positive")
    sim = cfg.get("sim", {})
    if not (isinstance(sim.get("timeout"), (int, float)) and sim.get("timeout", 0) > 0):
        errors.append("sim.timeout must be positive")
    if sim.get("fail_aggregation") not in ("any", "mean_of_successes"):
        errors.append("sim.fail_aggregation must be 'any' or 'mean_of_successes'")
    ev = cfg.get("evaluation", {})
    sizes = ev.get("swarm_sizes")
    if not (isinstance(sizes, list) and sizes and all(isinstance(s, int) and s >= 1 for s in sizes)):
        errors.append("evaluation.swarm_sizes must be a non-empty list of positive integers")
    return errors


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict[str, Any]:
    """Load a YAML config file merged over the built-in defaults."""
    cfg = default_config()
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}")
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must contain a mapping at top level")
        cfg = _merge(cfg, raw)
    if overrides:
        cfg = _merge(cfg, overrides)
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    return cfg


def manifest_hash(cfg: dict[str, Any]) -> str:
    """Content hash of a config mapping, stable under key ordering."""
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class RunManifest:
    """Identity of one CLI/service run: config plus seed, keying the output dir."""

    config: dict[str, Any] = field(repr=False)
    seed: int = 0
    strategy: str = "average"

    @property
    def hash(self) -> str:
        return manifest_hash({"config": self.config, "seed": self.seed, "strategy": self.strategy})

    def output_dir(self, root: str | Path) -> Path:
        return Path(root) / f"{self.strategy}-{self.hash}-s{self.seed}"
