"""Multi-UAV mission simulator: the black-box objective of the tuning loops.

Missions run synchronized receding-horizon rounds: every agent replans on
its own cadence against the commitments published in the previous round
(staged swap, so ordering inside a round cannot leak), then follows its
committed trajectory exactly (perfect tracking, perfect knowledge of
start/goal positions).  A mission succeeds when every agent has arrived;
it fails on timeout or on any pairwise distance dropping below the safety
bound.  Successful runs are additionally audited with a dense 1 ms
distance sweep before being reported as such.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .config import ThetaConfig
from .planner import receding_horizon_step
from .trajectory import KinematicLimits, PiecewiseBezier, hold_trajectory

logger = logging.getLogger(__name__)


class ConstructionError(ValueError):
    """A scenario or base task failed its structural checks."""


@dataclass(frozen=True)
class Scenario:
    """Agents' start/goal positions plus shared limits and mission timeout."""

    starts: np.ndarray          # (N, 3)
    goals: np.ndarray           # (N, 3)
    limits: KinematicLimits
    timeout: float = 60.0

    def __post_init__(self):
        starts = np.atleast_2d(np.asarray(self.starts, dtype=float))
        goals = np.atleast_2d(np.asarray(self.goals, dtype=float))
        if starts.shape != goals.shape or starts.shape[1] != 3 or starts.shape[0] < 1:
            raise ConstructionError("starts and goals must be matching (N, 3) arrays")
        for name, pts in (("start", starts), ("goal", goals)):
            if pts.shape[0] > 1:
                diffs = pts[:, None, :] - pts[None, :, :]
                d = np.linalg.norm(diffs, axis=2)
                np.fill_diagonal(d, np.inf)
                if d.min() < self.limits.d_min:
                    raise ConstructionError(
                        f"{name} positions closer than d_min ({d.min():.3f} < {self.limits.d_min})"
                    )
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "goals", goals)

    @property
    def n_agents(self) -> int:
        return self.starts.shape[0]

    def interaction_counts(self) -> np.ndarray:
        return geometry.interaction_counts(self.starts[:, :2], self.goals[:, :2])


@dataclass(frozen=True)
class BaseTask:
    """Library scenario whose ego agent faces exactly ``task_id`` crossings."""

    task_id: int
    scenario: Scenario
    ego_index: int = 0


@dataclass(frozen=True)
class MissionResult:
    mission_time: float | None
    arrival_times: list
    success: bool
    min_pairwise_distance: float
    failure_reason: str = "none"      # none | timeout | collision


@dataclass(frozen=True)
class SimSettings:
    timeout: float = 60.0
    arrival_pos_tol: float = 0.1
    arrival_speed_tol: float = 0.05
    replan_floor: float = 0.05
    check_dt: float = 0.01
    altitude: float = 1.5
    fail_aggregation: str = "any"

    @classmethod
    def from_mapping(cls, cfg: dict) -> "SimSettings":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


@dataclass(frozen=True)
class PlannerSettings:
    rho: float = 100.0
    degree: int = 5
    collocation_per_segment: int = 4
    distance_inflation: float = 1.4
    terminal_rest_weight: float = 1.0
    deterministic_iterations: int | None = None

    @classmethod
    def from_mapping(cls, cfg: dict) -> "PlannerSettings":
        return cls(**{k: cfg[k] for k in cls.__dataclass_fields__ if k in cfg})


# ---------------------------------------------------------------------------
# Scenario construction
# ---------------------------------------------------------------------------

def assign_parameters(scenario: Scenario, table) -> list[ThetaConfig]:
    """Per-agent parameter choice from the expected interaction level.

    ``table`` is either a single ThetaConfig (shared by every agent) or a
    sequence of six task-indexed configurations; agent i then receives the
    entry at min(interaction_count(i), 5).
    """
    if isinstance(table, ThetaConfig):
        return [table] * scenario.n_agents
    table = list(table)
    counts = scenario.interaction_counts()
    return [table[min(int(c), len(table) - 1)] for c in counts]


def make_base_task(
    task_id: int,
    limits: KinematicLimits | None = None,
    altitude: float = 1.5,
    timeout: float = 60.0,
) -> BaseTask:
    """Canonical library task geometry for the given interaction count.

    Task 0 is a single 10 m transit; task 1 a swap pair on one segment;
    task k >= 2 puts the ego on the horizontal diameter of a radius-5
    circle with k other agents flying vertical chords across it (swap
    pairs plus, for odd k, one single crossing agent).  Construction
    verifies that the ego's interaction count equals the task id.
    """
    if not 0 <= task_id <= 5:
        raise ConstructionError(f"task id must be in 0..5, got {task_id}")
    limits = limits or KinematicLimits()
    z = altitude
    radius = 5.0

    starts = [np.array([-radius, 0.0, z])]
    goals = [np.array([radius, 0.0, z])]
    k = task_id
    if k == 1:
        starts.append(goals[0].copy())
        goals.append(starts[0].copy())
    elif k >= 2:
        n_chords = math.ceil(k / 2)
        xs = [0.0] if n_chords == 1 else list(np.linspace(-2.5, 2.5, n_chords))
        remaining = k
        for x in xs:
            y = math.sqrt(radius**2 - x**2)
            top = np.array([x, y, z])
            bottom = np.array([x, -y, z])
            if remaining >= 2:
                starts.extend([top, bottom])
                goals.extend([bottom, top])
                remaining -= 2
            else:
                starts.append(top)
                goals.append(bottom)
                remaining -= 1

    scenario = Scenario(np.array(starts), np.array(goals), limits, timeout)
    ego_count = int(scenario.interaction_counts()[0])
    if ego_count != task_id:
        raise ConstructionError(
            f"base task {task_id} geometry yields ego interaction count {ego_count}"
        )
    return BaseTask(task_id=task_id, scenario=scenario, ego_index=0)


def generate_circle_scenario(
    n_agents: int,
    radius: float,
    seed: int,
    limits: KinematicLimits | None = None,
    altitude: float = 1.5,
    timeout: float = 60.0,
) -> Scenario:
    """Random mission on a circle: starts and goals on the perimeter.

    Rejection-sampled so pairwise start separations and pairwise goal
    separations stay above d_min and every agent's goal is distinct from
    its own start.  Deterministic per seed.
    """
    limits = limits or KinematicLimits()
    rng = np.random.default_rng(seed)

    def sample_ring() -> np.ndarray:
        for _ in range(2000):
            ang = rng.uniform(0.0, 2.0 * np.pi, n_agents)
            pts = np.stack([radius * np.cos(ang), radius * np.sin(ang),
                            np.full(n_agents, altitude)], axis=1)
            if n_agents == 1:
                return pts
            d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=2)
            np.fill_diagonal(d, np.inf)
            if d.min() >= limits.d_min:
                return pts
        raise ConstructionError("could not sample separated circle positions")

    starts = sample_ring()
    for _ in range(2000):
        goals = sample_ring()
        perm = rng.permutation(n_agents)
        goals = goals[perm]
        if np.all(np.linalg.norm(goals - starts, axis=1) >= max(limits.d_min, 1e-6)):
            return Scenario(starts, goals, limits, timeout)
    raise ConstructionError("could not assign goals distinct from starts")


# ---------------------------------------------------------------------------
# Mission execution
# ---------------------------------------------------------------------------

@dataclass
class MissionLog:
    """Optional per-mission trace for replay and plotting."""

    scenario: Scenario
    sample_dt: float
    times: list = field(default_factory=list)
    positions: list = field(default_factory=list)       # per sample: (N, 3)
    min_distances: list = field(default_factory=list)
    rounds: list = field(default_factory=list)          # dicts per replanning call

    def to_dict(self) -> dict:
        return {
            "starts": self.scenario.starts.tolist(),
            "goals": self.scenario.goals.tolist(),
            "d_min": self.scenario.limits.d_min,
            "timeout": self.scenario.timeout,
            "sample_dt": self.sample_dt,
            "times": self.times,
            "positions": [p.tolist() for p in self.positions],
            "min_distances": self.min_distances,
            "rounds": self.rounds,
        }


class _AgentState:
    """Commitment bookkeeping for one agent during a mission."""

    def __init__(self, index: int, start: np.ndarray, horizon: float):
        self.index = index
        self.committed = hold_trajectory(start, 0.0, max(horizon, 1.0))
        self.velocity_curve = self.committed.derivative()
        self.timeline: list[tuple[float, PiecewiseBezier]] = [(0.0, self.committed)]
        self.arrived_at: float | None = None
        self.frozen_pos: np.ndarray | None = None
        self.next_replan = 0.0

    def commit(self, traj: PiecewiseBezier, t: float):
        self.committed = traj
        self.velocity_curve = traj.derivative()
        self.timeline.append((t, traj))

    def freeze(self, t: float, pos: np.ndarray):
        self.arrived_at = t
        self.frozen_pos = pos.copy()
        self.commit(hold_trajectory(pos, t, 4.0), t)

    def eval_block(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Positions and velocities over a block of ticks (hold semantics)."""
        traj = self.committed
        inside = (times >= traj.start_time) & (times <= traj.end_time)
        tc = np.clip(times, traj.start_time, traj.end_time)
        pos = traj.sample(tc)
        vel = self.velocity_curve.sample(tc)
        vel[~inside] = 0.0
        if self.frozen_pos is not None:
            pos[:] = self.frozen_pos
            vel[:] = 0.0
        return pos, vel

    def position_history(self, times: np.ndarray) -> np.ndarray:
        """Dense positions over the whole mission from the commitment timeline."""
        out = np.empty((times.shape[0], 3))
        bounds = [t for t, _ in self.timeline] + [np.inf]
        for i, (t_from, traj) in enumerate(self.timeline):
            mask = (times >= t_from) & (times < bounds[i + 1])
            if mask.any():
                out[mask] = traj.sample_clamped(times[mask])
        if self.frozen_pos is not None:
            out[times >= self.arrived_at] = self.frozen_pos
        return out


def _pairwise_min(positions: np.ndarray) -> float:
    n = positions.shape[0]
    if n < 2:
        return np.inf
    diffs = positions[:, None, :] - positions[None, :, :]
    d = np.linalg.norm(diffs, axis=2)
    iu = np.triu_indices(n, k=1)
    return float(d[iu].min())


def _dense_min_distance(agents: list[_AgentState], t_end: float, dt: float = 1e-3) -> float:
    if len(agents) < 2:
        return np.inf
    times = np.arange(0.0, t_end + dt / 2, dt)
    tracks = np.stack([a.position_history(times) for a in agents])    # (N, S, 3)
    worst = np.inf
    n = len(agents)
    for i in range(n):
        for j in range(i + 1, n):
            gap = np.linalg.norm(tracks[i] - tracks[j], axis=1).min()
            worst = min(worst, float(gap))
    return worst


def run_mission(
    scenario: Scenario,
    params: list[ThetaConfig],
    seed: int = 0,
    sim: SimSettings | None = None,
    planner: PlannerSettings | None = None,
    log: bool = False,
) -> MissionResult | tuple[MissionResult, MissionLog]:
    """Fly one mission; returns the result (and a log when requested).

    ``seed`` labels the run; missions are deterministic apart from the
    planner's wall-clock anytime behavior, which deterministic test mode
    pins to a fixed iteration count.
    """
    if len(params) != scenario.n_agents:
        raise ValueError("need one parameter set per agent")
    sim = sim or SimSettings(timeout=scenario.timeout)
    planner = planner or PlannerSettings()
    n = scenario.n_agents
    dt = sim.check_dt
    d_fail = scenario.limits.d_min * (1.0 - 1e-6)

    agents = [_AgentState(i, scenario.starts[i], params[i].horizon) for i in range(n)]
    cadence = [max(p.delta_opt, sim.replan_floor) for p in params]

    mission_log = MissionLog(scenario, sample_dt=5 * dt) if log else None
    log_every = 5

    min_dist = np.inf
    tick = 0
    n_ticks = int(round(sim.timeout / dt))
    failure = None

    while tick <= n_ticks:
        t = tick * dt

        due = [a for a in agents if a.arrived_at is None and t >= a.next_replan - 1e-9]
        if due:
            staged = {}
            for a in due:
                pos, vel, acc = a.committed.state_at(t) if a.frozen_pos is None else (
                    a.frozen_pos, np.zeros(3), np.zeros(3))
                neighbors = [b.committed for b in agents if b.index != a.index]
                res = receding_horizon_step(
                    pos, vel, acc, scenario.goals[a.index], params[a.index],
                    neighbors, t, scenario.limits,
                    rho=planner.rho, degree=planner.degree,
                    collocation_per_segment=planner.collocation_per_segment,
                    distance_inflation=planner.distance_inflation,
                    terminal_rest_weight=planner.terminal_rest_weight,
                    deterministic_iterations=planner.deterministic_iterations,
                )
                staged[a.index] = res.trajectory
                a.next_replan = t + cadence[a.index]
                if mission_log is not None:
                    mission_log.rounds.append({
                        "t": t, "agent": a.index, "feasible": res.feasible,
                        "cost": res.cost, "iterations": res.iterations,
                        "control_points": res.trajectory.control_points.tolist(),
                        "knots": res.trajectory.knots.tolist(),
                    })
            for idx, traj in staged.items():
                agents[idx].commit(traj, t)

        # advance until the next replanning event with fixed commitments
        next_event = min(
            (a.next_replan for a in agents if a.arrived_at is None), default=np.inf
        )
        block_end = min(next_event, sim.timeout)
        n_block = max(1, int(math.ceil((block_end - t) / dt - 1e-9))) if block_end > t else 1
        times = (tick + 1 + np.arange(n_block)) * dt

        pos_blocks, vel_blocks = [], []
        for a in agents:
            p, v = a.eval_block(times)
            pos_blocks.append(p)
            vel_blocks.append(v)
        pos_blocks = np.stack(pos_blocks)       # (N, n_block, 3)
        vel_blocks = np.stack(vel_blocks)

        for j in range(n_block):
            tick += 1
            t_now = times[j]
            if t_now > sim.timeout + 1e-9:
                break
            current = pos_blocks[:, j, :].copy()
            for a in agents:
                if a.frozen_pos is not None:
                    current[a.index] = a.frozen_pos
            gap = _pairwise_min(current)
            min_dist = min(min_dist, gap)
            if mission_log is not None and tick % log_every == 0:
                mission_log.times.append(float(t_now))
                mission_log.positions.append(current.copy())
                mission_log.min_distances.append(float(gap))
            if gap < d_fail:
                failure = "collision"
                break
            for a in agents:
                if a.arrived_at is not None:
                    continue
                p = current[a.index]
                speed = float(np.linalg.norm(vel_blocks[a.index, j]))
                if (
                    np.linalg.norm(p - scenario.goals[a.index]) <= sim.arrival_pos_tol
                    and speed < sim.arrival_speed_tol
                ):
                    a.freeze(float(t_now), p)
            if all(a.arrived_at is not None for a in agents):
                break
        if failure or all(a.arrived_at is not None for a in agents):
            break

    arrival_times = [a.arrived_at for a in agents]
    if failure == "collision":
        result = MissionResult(None, arrival_times, False, min_dist, "collision")
    elif all(at is not None for at in arrival_times):
        t_m = max(arrival_times)
        dense_min = _dense_min_distance(agents, t_m)
        min_dist = min(min_dist, dense_min)
        if dense_min < d_fail:
            logger.info("dense audit demoted mission to collision (%.4f m)", dense_min)
            result = MissionResult(None, arrival_times, False, min_dist, "collision")
        else:
            result = MissionResult(float(t_m), arrival_times, True, min_dist, "none")
    else:
        result = MissionResult(None, arrival_times, False, min_dist, "timeout")

    if mission_log is not None:
        return result, mission_log
    return result


def evaluate_task(
    task_id: int,
    theta: ThetaConfig,
    repeats: int = 1,
    seed: int = 0,
    limits: KinematicLimits | None = None,
    sim: SimSettings | None = None,
    planner: PlannerSettings | None = None,
) -> MissionResult:
    """Average the base-task mission over repeats (adapter for the tuner).

    Aggregation is conservative by default: any failed repeat marks the
    whole evaluation failed.  ``mean_of_successes`` keeps the mean over
    successful repeats instead as long as at least one run succeeded.
    """
    sim = sim or SimSettings()
    task = make_base_task(task_id, limits=limits, altitude=sim.altitude, timeout=sim.timeout)
    params = [theta] * task.scenario.n_agents

    results = [
        run_mission(task.scenario, params, seed=seed * 1000 + r, sim=sim, planner=planner)
        for r in range(repeats)
    ]
    times = [r.mission_time for r in results if r.success]
    min_dist = min(r.min_pairwise_distance for r in results)
    arrivals = results[0].arrival_times
    failures = [r for r in results if not r.success]

    if sim.fail_aggregation == "any":
        ok = not failures
    else:
        ok = bool(times)
    if ok:
        mean_arrivals = [
            float(np.mean([r.arrival_times[i] for r in results if r.success]))
            for i in range(task.scenario.n_agents)
        ]
        return MissionResult(float(np.mean(times)), mean_arrivals, True, min_dist, "none")
    reason = failures[0].failure_reason if failures else "none"
    return MissionResult(None, arrivals, False, min_dist, reason)
