"""Campaign loops for tuning the planner parameters.

Two strategies share one multi-task surrogate:

* ``average`` greedily improves the across-task mean objective with a
  two-stage expected-improvement heuristic and returns one shared triple.
* ``single_task`` evaluates every task each iteration at its own GP-UCB
  argmax and returns one triple per task.

Rewards are negated mission times; failed missions receive a penalty
pinned slightly below the worst successful observation seen so far.
Campaign state is checkpointed to JSON after every evaluation and runs
are resumable and bit-reproducible: all random streams are derived from
(seed, stream, iteration) labels rather than shared generator state.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .acquisition import (
    Incumbent,
    beta_schedule,
    select_avg_query,
    select_single_task_queries,
)
from .config import ThetaConfig, ThetaDomain, manifest_hash
from .gp import KernelParams
from .mtgp import IcmParams, MtDataset, fit_mt_hyperparams, mtgp_fit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalOutcome:
    """What the black box reports for one (theta, task) evaluation."""

    success: bool
    mission_time: float | None

    def __post_init__(self):
        if self.success and self.mission_time is None:
            raise ValueError("successful evaluations must carry a mission time")


Objective = Callable[[ThetaConfig, int, int], EvalOutcome]


@dataclass
class Observation:
    theta: ThetaConfig
    task: int
    mission_time: float | None
    success: bool
    reward: float
    phase: str = "bo"               # init | bo
    iteration: int = -1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta"] = list(self.theta.as_tuple())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        d = dict(d)
        m, horizon, delta = d.pop("theta")
        return cls(theta=ThetaConfig(int(m), horizon, delta), **d)


@dataclass(frozen=True)
class CampaignConfig:
    strategy: str = "average"
    n_max: int = 350
    init_points_per_task: int = 18
    repeats_per_eval: int = 3
    seed: int = 0
    n_tasks: int = 6
    penalty_margin_frac: float = 0.1
    penalty_fallback: float = -1000.0
    refit_every: int = 25
    fit_restarts: int = 8
    stall_iterations: int = 50
    stall_tol: float = 1.0e-3
    budget_unit: str = "evaluations"
    beta_delta: float = 0.1
    beta_cap: float = 9.0
    acq_candidates: int = 1024
    coreg_rank: int = 2
    force_identity_icm: bool = False
    fixed_kernel: KernelParams | None = None

    @classmethod
    def from_mapping(cls, cfg: dict) -> "CampaignConfig":
        known = {k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg}
        return cls(**known)

    def hash(self) -> str:
        d = {k: v for k, v in asdict(self).items() if k != "fixed_kernel"}
        return manifest_hash(d)


@dataclass
class CampaignResult:
    strategy: str
    best_theta: ThetaConfig | None
    best_theta_per_task: list[ThetaConfig] | None
    observations: list[Observation]
    penalty: float
    kernel: KernelParams
    icm: IcmParams
    noise: float | np.ndarray
    n_evaluator_calls: int
    n_retries: int
    n_skipped: int
    converged: bool
    no_success: bool
    wall_time: float
    events: list[str] = field(default_factory=list)

    def best_rows(self) -> list[dict]:
        """Tabular summary: one row (average) or one row per task."""
        if self.strategy == "average":
            t = self.best_theta
            return [{"task": "-", "m": t.m, "horizon": t.horizon, "delta_opt": t.delta_opt}]
        return [
            {"task": i, "m": t.m, "horizon": t.horizon, "delta_opt": t.delta_opt}
            for i, t in enumerate(self.best_theta_per_task)
        ]


def derive_seed(seed: int, *labels: int) -> int:
    """Stable integer sub-seed from a label path (resume-safe)."""
    return int(np.random.SeedSequence((seed, *labels)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Initial design
# ---------------------------------------------------------------------------

def initial_design(cfg: CampaignConfig) -> list[tuple[ThetaConfig, int]]:
    """Seeded space-filling design: per task, a Latin hypercube over
    (horizon, delta_opt) with the segment count cycling through its six
    values; emission order cycles through the tasks."""
    per_task = cfg.init_points_per_task
    thetas: list[list[ThetaConfig]] = []
    for task in range(cfg.n_tasks):
        rng = np.random.default_rng([cfg.seed, 101, task])
        bins_h = rng.permutation(per_task)
        bins_d = rng.permutation(per_task)
        jitter = rng.uniform(size=(per_task, 2))
        h_lo, h_hi = ThetaDomain.lower[1], ThetaDomain.upper[1]
        d_lo, d_hi = ThetaDomain.lower[2], ThetaDomain.upper[2]
        rows = []
        for i in range(per_task):
            horizon = h_lo + (bins_h[i] + jitter[i, 0]) / per_task * (h_hi - h_lo)
            delta = d_lo + (bins_d[i] + jitter[i, 1]) / per_task * (d_hi - d_lo)
            m = ThetaDomain.m_values[i % len(ThetaDomain.m_values)]
            rows.append(ThetaConfig(m=m, horizon=float(horizon), delta_opt=float(delta)))
        thetas.append(rows)
    design = []
    for i in range(per_task):
        for task in range(cfg.n_tasks):
            design.append((thetas[task][i], task))
    return design


# ---------------------------------------------------------------------------
# Penalty handling
# ---------------------------------------------------------------------------

def apply_penalty(outcome: EvalOutcome, penalty: float) -> float:
    """Reward convention: success -> negated mission time, failure -> penalty."""
    if outcome.success:
        return -float(outcome.mission_time)
    return penalty


def compute_penalty(observations: list[Observation], margin_frac: float, fallback: float) -> float:
    """Penalty slightly below the worst successful reward seen so far."""
    succ = [o.reward for o in observations if o.success]
    if not succ:
        return fallback
    worst, best = min(succ), max(succ)
    spread = best - worst
    margin = margin_frac * spread if spread > 0 else max(margin_frac * abs(worst), 1e-2)
    return worst - margin


# ---------------------------------------------------------------------------
# Campaign state
# ---------------------------------------------------------------------------

class _Campaign:
    """Mutable in-flight state shared by both strategies."""

    def __init__(self, cfg: CampaignConfig, checkpoint_path: str | Path | None):
        self.cfg = cfg
        self.checkpoint_path = Path(checkpoint_path) if checkpoint_path else None
        self.observations: list[Observation] = []
        self.events: list[str] = []
        self.penalty = cfg.penalty_fallback
        self.kernel: KernelParams | None = cfg.fixed_kernel
        self.icm: IcmParams | None = None
        self.noise = None
        self.calls = 0
        self.retries = 0
        self.skipped = 0
        self.iteration = 0

    # -- evaluation ---------------------------------------------------------
    def evaluate(self, objective: Objective, theta: ThetaConfig, task: int,
                 seed: int, phase: str, iteration: int) -> Observation | None:
        outcome = None
        for attempt in (0, 1):
            try:
                self.calls += 1
                outcome = objective(theta, task, seed)
                break
            except Exception as exc:        # evaluator crash, not mission failure
                if attempt == 0:
                    self.retries += 1
                    self.events.append(f"evaluator crash at iter {iteration}: {exc!r}; retrying")
                else:
                    self.skipped += 1
                    msg = f"evaluator crash at iter {iteration}: {exc!r}; skipped"
                    self.events.append(msg)
                    logger.warning(msg)
        if outcome is None:
            return None
        obs = Observation(
            theta=theta, task=task, mission_time=outcome.mission_time,
            success=outcome.success, reward=apply_penalty(outcome, self.penalty),
            phase=phase, iteration=iteration,
        )
        self.observations.append(obs)
        self._maybe_lower_penalty(obs)
        self.checkpoint()
        return obs

    def _maybe_lower_penalty(self, obs: Observation):
        """Keep every failure reward strictly below every success reward."""
        if not obs.success or obs.reward > self.penalty:
            return
        new_penalty = compute_penalty(
            self.observations, self.cfg.penalty_margin_frac, self.cfg.penalty_fallback
        )
        self.events.append(
            f"penalty lowered {self.penalty:.4f} -> {new_penalty:.4f} "
            f"after success with reward {obs.reward:.4f}"
        )
        self.penalty = new_penalty
        for o in self.observations:
            if not o.success:
                o.reward = self.penalty

    def set_penalty_from_init(self):
        self.penalty = compute_penalty(
            self.observations, self.cfg.penalty_margin_frac, self.cfg.penalty_fallback
        )
        for o in self.observations:
            if not o.success:
                o.reward = self.penalty

    # -- model --------------------------------------------------------------
    def dataset(self) -> MtDataset:
        raw = np.array([o.theta.as_tuple() for o in self.observations])
        return MtDataset(
            X=ThetaDomain.normalize(raw),
            tasks=np.array([o.task for o in self.observations]),
            y=np.array([o.reward for o in self.observations]),
        )

    def fit_hyperparams(self, per_task_noise: bool):
        cfg = self.cfg
        fix = IcmParams.identity(cfg.n_tasks, cfg.coreg_rank) if cfg.force_identity_icm else None
        if cfg.fixed_kernel is not None:
            self.kernel = cfg.fixed_kernel
            self.icm = fix if fix is not None else (self.icm or IcmParams.identity(cfg.n_tasks, cfg.coreg_rank))
            self.noise = cfg.fixed_kernel.noise_variance
            return
        self.kernel, self.icm, self.noise = fit_mt_hyperparams(
            self.dataset(), n_tasks=cfg.n_tasks, rank=cfg.coreg_rank,
            restarts=cfg.fit_restarts, seed=derive_seed(cfg.seed, 5, self.iteration),
            per_task_noise=per_task_noise, fix_icm=fix,
        )

    def posterior(self):
        return mtgp_fit(self.dataset(), self.kernel, self.icm, noise=self.noise)

    # -- persistence ----------------------------------------------------------
    def checkpoint(self):
        if self.checkpoint_path is None:
            return
        state = {
            "version": 1,
            "config_hash": self.cfg.hash(),
            "strategy": self.cfg.strategy,
            "iteration": self.iteration,
            "penalty": self.penalty,
            "counters": {"calls": self.calls, "retries": self.retries, "skipped": self.skipped},
            "observations": [o.to_dict() for o in self.observations],
            "hyperparams": self._hyperparams_dict(),
            "events": self.events,
        }
        tmp = self.checkpoint_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=1))
        tmp.replace(self.checkpoint_path)

    def _hyperparams_dict(self) -> dict | None:
        if self.kernel is None or self.icm is None:
            return None
        noise = self.noise
        return {
            "length_scales": self.kernel.length_scales.tolist(),
            "signal_variance": self.kernel.signal_variance,
            "noise": noise.tolist() if isinstance(noise, np.ndarray) else noise,
            "icm_factor": self.icm.factor.tolist(),
            "icm_diag": self.icm.diag.tolist(),
        }

    def restore(self, path: str | Path):
        state = json.loads(Path(path).read_text())
        if state["config_hash"] != self.cfg.hash():
            raise ValueError("checkpoint belongs to a different campaign configuration")
        self.iteration = state["iteration"]
        self.penalty = state["penalty"]
        self.calls = state["counters"]["calls"]
        self.retries = state["counters"]["retries"]
        self.skipped = state["counters"]["skipped"]
        self.observations = [Observation.from_dict(d) for d in state["observations"]]
        self.events = list(state["events"])
        hp = state.get("hyperparams")
        if hp:
            self.kernel = KernelParams(
                length_scales=np.array(hp["length_scales"]),
                signal_variance=hp["signal_variance"],
                noise_variance=float(np.atleast_1d(hp["noise"])[0]),
            )
            self.icm = IcmParams(factor=np.array(hp["icm_factor"]), diag=np.array(hp["icm_diag"]))
            noise = hp["noise"]
            self.noise = np.array(noise) if isinstance(noise, list) else noise


def _run_initial_design(camp: _Campaign, objective: Objective):
    design = initial_design(camp.cfg)
    done = len([o for o in camp.observations if o.phase == "init"])
    for idx in range(done, len(design)):
        theta, task = design[idx]
        camp.evaluate(objective, theta, task, derive_seed(camp.cfg.seed, 1, idx), "init", -1)
    camp.set_penalty_from_init()
    camp.checkpoint()


def compute_avg_incumbent(post, observations: list[Observation], penalty: float,
                          n_tasks: int) -> Incumbent:
    """Averaged-objective incumbent over previously queried triples.

    At each distinct triple, tasks with observations contribute their mean
    observed reward; missing tasks are imputed with the posterior mean.
    Per-task incumbents use only successful observations when any exist,
    falling back to the penalty value.
    """
    seen: dict[tuple, dict[int, list[float]]] = {}
    for o in observations:
        seen.setdefault(o.theta.as_tuple(), {}).setdefault(o.task, []).append(o.reward)
    triples = list(seen)
    units = ThetaDomain.normalize(np.array(triples))
    means = np.stack([post.predict_batch(units, t)[0] for t in range(n_tasks)], axis=1)
    best_value = -np.inf
    for i, triple in enumerate(triples):
        vals = [
            float(np.mean(seen[triple][t])) if t in seen[triple] else float(means[i, t])
            for t in range(n_tasks)
        ]
        best_value = max(best_value, float(np.mean(vals)))

    per_task = np.full(n_tasks, penalty)
    for t in range(n_tasks):
        succ = [o.reward for o in observations if o.task == t and o.success]
        if succ:
            per_task[t] = max(succ)
    return Incumbent(best_value=best_value, per_task_best=per_task)


# ---------------------------------------------------------------------------
# Campaign drivers
# ---------------------------------------------------------------------------

def run_average_campaign(
    cfg: CampaignConfig,
    objective: Objective,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    on_progress: Callable[[int, float | None], None] | None = None,
) -> CampaignResult:
    """Shared-parameter strategy: maximize the mean objective across tasks."""
    t0 = time.time()
    camp = _Campaign(cfg, checkpoint_path)
    if resume_from:
        camp.restore(resume_from)
    _run_initial_design(camp, objective)
    if camp.kernel is None or cfg.fixed_kernel is not None:
        camp.fit_hyperparams(per_task_noise=False)

    n_init = len([o for o in camp.observations if o.phase == "init"])
    best_inc = -np.inf
    stall = 0
    converged = False

    while len(camp.observations) - n_init < cfg.n_max:
        i = camp.iteration
        if i > 0 and i % cfg.refit_every == 0 and cfg.fixed_kernel is None:
            camp.fit_hyperparams(per_task_noise=False)
        post = camp.posterior()
        incumbent = compute_avg_incumbent(post, camp.observations, camp.penalty, cfg.n_tasks)
        query = select_avg_query(
            post, incumbent, seed=derive_seed(cfg.seed, 3, i),
            n_candidates=cfg.acq_candidates,
        )
        camp.iteration += 1
        camp.evaluate(objective, query.theta, query.task,
                      derive_seed(cfg.seed, 2, i), "bo", i)
        if on_progress:
            on_progress(len(camp.observations), incumbent.best_value)
        if incumbent.best_value > best_inc + cfg.stall_tol:
            best_inc = incumbent.best_value
            stall = 0
        else:
            stall += 1
            if stall >= cfg.stall_iterations:
                converged = True
                break
        if camp.skipped and camp.iteration > 2 * cfg.n_max:
            break       # evaluator keeps crashing; bail out

    post = camp.posterior()
    triples = sorted({o.theta.as_tuple() for o in camp.observations})
    units = ThetaDomain.normalize(np.array(triples))
    avg_means, _ = post.avg_objective_batch(units)
    best_theta = ThetaConfig.from_tuple(triples[int(np.argmax(avg_means))])
    no_success = not any(o.success for o in camp.observations)
    if no_success:
        camp.events.append("no successful evaluation in the whole campaign")

    return CampaignResult(
        strategy="average", best_theta=best_theta, best_theta_per_task=None,
        observations=camp.observations, penalty=camp.penalty,
        kernel=camp.kernel, icm=camp.icm, noise=camp.noise,
        n_evaluator_calls=camp.calls, n_retries=camp.retries, n_skipped=camp.skipped,
        converged=converged, no_success=no_success,
        wall_time=time.time() - t0, events=camp.events,
    )


def run_single_task_campaign(
    cfg: CampaignConfig,
    objective: Objective,
    checkpoint_path: str | Path | None = None,
    resume_from: str | Path | None = None,
    on_progress: Callable[[int, float | None], None] | None = None,
) -> CampaignResult:
    """Per-task strategy: every iteration queries each task at its GP-UCB argmax.

    With ``budget_unit == "evaluations"`` the loop stops before an iteration
    would push the post-design evaluation count past n_max; with
    ``"iterations"`` it runs n_max full rounds.
    """
    t0 = time.time()
    camp = _Campaign(cfg, checkpoint_path)
    if resume_from:
        camp.restore(resume_from)
    _run_initial_design(camp, objective)
    if camp.kernel is None or cfg.fixed_kernel is not None:
        camp.fit_hyperparams(per_task_noise=True)

    n_init = len([o for o in camp.observations if o.phase == "init"])
    grid_size = cfg.acq_candidates * len(ThetaDomain.m_values)
    best_inc = -np.inf
    stall = 0
    converged = False

    def budget_allows() -> bool:
        if cfg.budget_unit == "iterations":
            return camp.iteration < cfg.n_max
        return len(camp.observations) - n_init + cfg.n_tasks <= cfg.n_max

    while budget_allows():
        i = camp.iteration
        if i > 0 and i % cfg.refit_every == 0 and cfg.fixed_kernel is None:
            camp.fit_hyperparams(per_task_noise=True)
        post = camp.posterior()
        beta = beta_schedule(i + 1, grid_size, cfg.beta_delta, cfg.beta_cap)
        queries = select_single_task_queries(
            post, beta, seed=derive_seed(cfg.seed, 3, i), n_candidates=cfg.acq_candidates,
        )
        camp.iteration += 1
        for query in queries:
            camp.evaluate(objective, query.theta, query.task,
                          derive_seed(cfg.seed, 2, i, query.task), "bo", i)
        if on_progress:
            on_progress(len(camp.observations), best_inc if np.isfinite(best_inc) else None)
        inc = np.mean([
            max((o.reward for o in camp.observations if o.task == t), default=camp.penalty)
            for t in range(cfg.n_tasks)
        ])
        if inc > best_inc + cfg.stall_tol:
            best_inc = inc
            stall = 0
        else:
            stall += 1
            if stall >= cfg.stall_iterations:
                converged = True
                break

    per_task: list[ThetaConfig] = []
    no_success_tasks = []
    for t in range(cfg.n_tasks):
        task_obs = [o for o in camp.observations if o.task == t]
        succ = [o for o in task_obs if o.success]
        pool = succ if succ else task_obs
        best = max(pool, key=lambda o: o.reward)
        per_task.append(best.theta)
        if not succ:
            no_success_tasks.append(t)
    if no_success_tasks:
        camp.events.append(f"no successful evaluation for tasks {no_success_tasks}")

    return CampaignResult(
        strategy="single_task", best_theta=None, best_theta_per_task=per_task,
        observations=camp.observations, penalty=camp.penalty,
        kernel=camp.kernel, icm=camp.icm, noise=camp.noise,
        n_evaluator_calls=camp.calls, n_retries=camp.retries, n_skipped=camp.skipped,
        converged=converged, no_success=bool(no_success_tasks),
        wall_time=time.time() - t0, events=camp.events,
    )


def run_campaign(cfg: CampaignConfig, objective: Objective, **kwargs) -> CampaignResult:
    if cfg.strategy == "average":
        return run_average_campaign(cfg, objective, **kwargs)
    if cfg.strategy == "single_task":
        return run_single_task_campaign(cfg, objective, **kwargs)
    raise ValueError(f"unknown strategy {cfg.strategy!r}")
