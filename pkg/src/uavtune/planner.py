"""Per-UAV anytime trajectory optimizer.

Solves a receding-horizon problem over piecewise Bezier control points:
minimize rho * |endpoint - goal| plus the integral of squared snap, subject
to pairwise separation from committed neighbor trajectories, velocity and
acceleration bounds, and exact initial position/velocity/acceleration.

The nonconvex separation constraints are handled by sequential
convexification: each inner iteration linearizes them about the current
iterate as separating-hyperplane constraints at collocation times and takes
a trust-region quadratic step (cvxopt QP).  The loop runs until a
wall-clock budget expires and keeps the best iterate that passes a dense
feasibility check, so a usable trajectory is available whenever the budget
cuts in (anytime property).  Deterministic test mode replaces the
wall-clock budget with a pinned iteration count.

For near head-on encounters the separating direction is tilted slightly
to the agent's right, which breaks the symmetry of mutual avoidance
between agents planning against each other's previous commitments.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers as cvx_solvers

from .trajectory import (
    KinematicLimits,
    PiecewiseBezier,
    bernstein_basis,
    check_limits,
    monomial_to_bezier,
    snap_cost,
)

logger = logging.getLogger(__name__)

DENSE_CHECK_DT = 1e-3           # planner-side feasibility sampling step [s]
RIGHT_BIAS = 0.08               # lateral tilt of separating directions
CONSTRAINT_RADIUS = 2.0         # extra metres beyond which a sample is unconstrained


@dataclass(frozen=True)
class PlanRequest:
    """Inputs of one planning call; neighbor curves carry absolute times."""

    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    goal: np.ndarray
    horizon: float
    segments: int
    budget: float
    start_time: float = 0.0
    neighbors: tuple[PiecewiseBezier, ...] = ()
    limits: KinematicLimits = field(default_factory=KinematicLimits)
    rho: float = 100.0
    degree: int = 5
    collocation_per_segment: int = 4
    distance_inflation: float = 1.4
    terminal_rest_weight: float = 1.0
    deterministic_iterations: int | None = None

    def __post_init__(self):
        for name in ("position", "velocity", "acceleration", "goal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        if self.horizon <= 0 or self.budget <= 0:
            raise ValueError("horizon and budget must be positive")
        if self.segments < 2:
            raise ValueError("need at least two segments")
        if self.degree < 5:
            raise ValueError("planner degree must be at least 5")


@dataclass
class PlanResult:
    trajectory: PiecewiseBezier
    feasible: bool
    iterations: int
    cost: float
    elapsed: float
    cost_trace: list[float]
    iteration_durations: list[float]
    status: str = "ok"


# ---------------------------------------------------------------------------
# Free-variable parameterization
#
# The first three control points of segment 0 are pinned by the initial
# state; the first three of each later segment follow from C2 continuity
# at the junction (uniform knot spacing).  Everything else is free, so the
# decision variable is m * (degree - 2) control points.
# ---------------------------------------------------------------------------

def _affine_map(m: int, n: int, dt: float, p0, v0, a0):
    """Control points as an affine function of the free points.

    Returns (A, C): A has shape (m*(n+1), F) and C shape (m*(n+1), 3) so
    that stacking segment control points row-wise gives P = A @ F + C.
    """
    n_free = m * (n - 2)
    total = m * (n + 1)
    A = np.zeros((total, n_free))
    C = np.zeros((total, 3))

    p1 = p0 + v0 * dt / n
    p2 = a0 * dt**2 / (n * (n - 1)) + 2.0 * p1 - p0
    C[0], C[1], C[2] = p0, p1, p2
    for k in range(3, n + 1):
        A[k, k - 3] = 1.0

    for seg in range(1, m):
        base = seg * (n + 1)
        prev = base - (n + 1)
        # position, velocity, acceleration continuity with equal durations
        A[base] = A[prev + n]
        C[base] = C[prev + n]
        A[base + 1] = 2.0 * A[prev + n] - A[prev + n - 1]
        C[base + 1] = 2.0 * C[prev + n] - C[prev + n - 1]
        A[base + 2] = 4.0 * A[prev + n] - 4.0 * A[prev + n - 1] + A[prev + n - 2]
        C[base + 2] = 4.0 * C[prev + n] - 4.0 * C[prev + n - 1] + C[prev + n - 2]
        for k in range(3, n + 1):
            A[base + k, seg * (n - 2) + k - 3] = 1.0
    return A, C


@lru_cache(maxsize=64)
def _snap_operator_unit(n: int) -> np.ndarray:
    """Control points -> snap control points for a unit-duration segment."""
    D = np.eye(n + 1)
    deg = n
    for _ in range(4):
        diff = (np.eye(deg + 1, deg + 1, k=1) - np.eye(deg + 1, deg + 1))[:deg]
        D = deg * (diff @ D)
        deg -= 1
    return D


def _snap_operator(n: int, dt: float) -> np.ndarray:
    return _snap_operator_unit(n) / dt**4


def _bernstein_row(n: int, u: float) -> np.ndarray:
    return bernstein_basis(n, np.array([u]))[0]


@lru_cache(maxsize=16)
def _bernstein_gram(q: int) -> np.ndarray:
    from scipy.special import comb

    j = np.arange(q + 1)
    G = comb(q, j)[:, None] * comb(q, j)[None, :] / comb(2 * q, j[:, None] + j[None, :])
    return G / (2 * q + 1)


# ---------------------------------------------------------------------------
# Initial guess
# ---------------------------------------------------------------------------

def _quintic_rest_poly(p0, v0, a0, p1, T):
    """Per-axis quintic with given start state, ending at rest at p1."""
    M = np.zeros((6, 6))
    M[0, 0] = 1.0                                   # p(0)
    M[1, 1] = 1.0                                   # p'(0)
    M[2, 2] = 2.0                                   # p''(0)
    powers = T ** np.arange(6)
    M[3] = powers                                   # p(T)
    M[4] = np.arange(6) * T ** np.array([0, 0, 1, 2, 3, 4])
    M[5] = np.array([0, 0, 2, 6 * T, 12 * T**2, 20 * T**3])
    rhs = np.stack([p0, v0, a0, p1, np.zeros(3), np.zeros(3)])
    return np.linalg.solve(M, rhs)                  # (6, 3) monomial coeffs in t


def _poly_to_piecewise(coeffs: np.ndarray, T: float, m: int, degree: int, t0: float) -> PiecewiseBezier:
    """Exactly rebase a global degree-5 polynomial onto m Bezier segments."""
    dt = T / m
    knots = t0 + dt * np.arange(m + 1)
    deriv_stack = [coeffs]
    for _ in range(5):
        d = deriv_stack[-1]
        deriv_stack.append((np.arange(1, d.shape[0])[:, None] * d[1:]) if d.shape[0] > 1 else np.zeros((1, 3)))
    segments = []
    for l in range(m):
        tl = l * dt
        local = np.zeros((6, 3))
        fact = 1.0
        for j in range(6):
            d = deriv_stack[j]
            powers = tl ** np.arange(d.shape[0])
            local[j] = (powers[:, None] * d).sum(axis=0) * dt**j / fact
            fact *= j + 1
        segments.append(monomial_to_bezier(local, 5))
    curve = PiecewiseBezier(np.stack(segments), knots)
    if degree > 5:
        curve = curve.elevated(degree)
    return curve


def _kinematics_margin(curve: PiecewiseBezier, limits: KinematicLimits) -> float:
    """Largest relative violation of the sampled velocity/acceleration bounds."""
    times = np.linspace(curve.start_time, curve.end_time, 80)
    vel = curve.derivative()
    acc = vel.derivative()
    v = np.linalg.norm(vel.sample(times), axis=1).max() / limits.v_max
    a = np.linalg.norm(acc.sample(times), axis=1).max() / limits.a_max
    return max(v, a)


def initial_guess(req: PlanRequest) -> PiecewiseBezier:
    """Dynamically consistent seed trajectory that respects the kinematic bounds.

    Tries rest-to-rest quintics toward the goal-projected target, shrinking
    the displacement toward a pure braking profile until the sampled
    velocity/acceleration stay within limits.
    """
    p0, v0, a0 = req.position, req.velocity, req.acceleration
    to_goal = req.goal - p0
    dist = float(np.linalg.norm(to_goal))
    z_stop = p0 + 0.35 * v0 * req.horizon
    if dist > 1e-12:
        reach = min(dist, 0.5 * req.limits.v_max * req.horizon)
        z_goal = p0 + to_goal / dist * reach
    else:
        z_goal = p0.copy()

    best_curve, best_margin = None, np.inf
    for s in (1.0, 0.7, 0.5, 0.3, 0.15, 0.0):
        target = z_stop + s * (z_goal - z_stop)
        coeffs = _quintic_rest_poly(p0, v0, a0, target, req.horizon)
        curve = _poly_to_piecewise(coeffs, req.horizon, req.segments, req.degree, req.start_time)
        margin = _kinematics_margin(curve, req.limits)
        if margin <= 0.999:
            return curve
        if margin < best_margin:
            best_curve, best_margin = curve, margin
    logger.warning("initial guess exceeds kinematic limits by factor %.3f", best_margin)
    return best_curve


# ---------------------------------------------------------------------------
# Feasibility and cost of a concrete iterate
# ---------------------------------------------------------------------------

def _true_cost(curve: PiecewiseBezier, req: PlanRequest) -> float:
    endpoint = curve.control_points[-1, -1]
    return req.rho * float(np.linalg.norm(endpoint - req.goal)) + snap_cost(curve)


def _min_separation(curve: PiecewiseBezier, neighbors, dt: float = DENSE_CHECK_DT) -> float:
    if not neighbors:
        return np.inf
    per_segment = int(np.ceil(curve.durations[0] / dt)) + 1
    times, ego = curve.sample_dense(per_segment)
    worst = np.inf
    for nb in neighbors:
        gap = np.linalg.norm(ego - nb.sample_clamped(times), axis=1).min()
        worst = min(worst, float(gap))
    return worst


@dataclass(frozen=True)
class _IterateEval:
    cost: float
    min_sep: float
    v_bound: float
    a_bound: float
    feasible: bool

    def merit(self, req: PlanRequest) -> float:
        """True cost plus heavy penalties on constraint violation."""
        viol = (
            max(0.0, req.limits.d_min * req.distance_inflation - self.min_sep)
            + max(0.0, self.v_bound - req.limits.v_max)
            + max(0.0, self.a_bound - req.limits.a_max)
        )
        return self.cost + 1e4 * viol


def _verdict_distance(req: PlanRequest) -> float:
    # Accepted iterates keep part of the QP inflation as an execution
    # buffer: neighbors deviate from the commitments we planned against
    # once they replan themselves.
    return req.limits.d_min * math.sqrt(req.distance_inflation)


def _evaluate_iterate(curve: PiecewiseBezier, req: PlanRequest, neighbors) -> _IterateEval:
    rep = check_limits(curve, req.limits)
    min_sep = _min_separation(curve, neighbors)
    feasible = rep.ok and min_sep >= _verdict_distance(req) - 1e-6
    return _IterateEval(_true_cost(curve, req), min_sep, rep.max_v_bound, rep.max_a_bound, feasible)


# ---------------------------------------------------------------------------
# The SCP loop
# ---------------------------------------------------------------------------

def _prune_neighbors(req: PlanRequest) -> list[PiecewiseBezier]:
    """Drop neighbors that cannot come within reach over the horizon."""
    t = np.linspace(req.start_time, req.start_time + req.horizon, 50)
    reach = req.limits.v_max * (t - req.start_time)
    d_eff = req.limits.d_min * req.distance_inflation
    keep = []
    for nb in req.neighbors:
        gap = np.linalg.norm(nb.sample_clamped(t) - req.position[None, :], axis=1)
        if np.min(gap - reach) <= d_eff + 0.2:
            keep.append(nb)
    return keep


def _separating_directions(diffs: np.ndarray) -> np.ndarray:
    """Unit separating directions with a slight rightward tilt (symmetry break)."""
    norms = np.linalg.norm(diffs, axis=1, keepdims=True)
    a = np.where(norms > 1e-9, diffs / np.maximum(norms, 1e-9),
                 np.array([1.0, 0.0, 0.0]))
    lateral = np.stack([a[:, 1], -a[:, 0], np.zeros(len(a))], axis=1)   # a x ez
    lat_norm = np.linalg.norm(lateral, axis=1, keepdims=True)
    tilted = np.where(lat_norm > 1e-6, a + RIGHT_BIAS * lateral / np.maximum(lat_norm, 1e-6), a)
    return tilted / np.linalg.norm(tilted, axis=1, keepdims=True)


class _Subproblem:
    """Precomputed affine structure reused across inner iterations."""

    def __init__(self, req: PlanRequest):
        self.req = req
        m, n = req.segments, req.degree
        self.m, self.n = m, n
        self.dt = req.horizon / m
        self.A, self.C = _affine_map(m, n, self.dt, req.position, req.velocity, req.acceleration)
        self.n_free = self.A.shape[1]

        D4 = _snap_operator(n, self.dt)
        G4 = _bernstein_gram(n - 4)
        H = np.zeros((self.n_free, self.n_free))
        G_lin = np.zeros((self.n_free, 3))
        for seg in range(m):
            rows = slice(seg * (n + 1), (seg + 1) * (n + 1))
            DA = D4 @ self.A[rows]
            DC = D4 @ self.C[rows]
            H += self.dt * DA.T @ G4 @ DA
            G_lin += self.dt * DA.T @ G4 @ DC
        self.H_snap = H
        self.G_snap = G_lin

        self.end_row = self.A[-1]
        self.end_const = self.C[-1]
        vel_scale = n / self.dt
        self.vend_row = vel_scale * (self.A[-1] - self.A[-2])
        self.vend_const = vel_scale * (self.C[-1] - self.C[-2])

        # collocation time/row cache for distance constraints
        self.colloc_times = []
        self.colloc_rows = []
        self.colloc_consts = []
        s = req.collocation_per_segment
        for seg in range(m):
            rows = slice(seg * (n + 1), (seg + 1) * (n + 1))
            for u in np.linspace(0.0, 1.0, s + 2):
                if seg > 0 and u == 0.0:
                    continue        # shared knot already covered
                b = _bernstein_row(n, float(u))
                self.colloc_times.append(req.start_time + (seg + u) * self.dt)
                self.colloc_rows.append(b @ self.A[rows])
                self.colloc_consts.append(b @ self.C[rows])
        self.colloc_times = np.array(self.colloc_times)
        self.colloc_rows = np.array(self.colloc_rows)
        self.colloc_consts = np.array(self.colloc_consts)

        # velocity / acceleration control-point rows
        self.vel_rows, self.vel_consts = self._derivative_rows(order=1)
        self.acc_rows, self.acc_consts = self._derivative_rows(order=2)

    def _derivative_rows(self, order: int):
        n, dt = self.n, self.dt
        rows_out, consts_out = [], []
        for seg in range(self.m):
            rows = slice(seg * (self.n + 1), (seg + 1) * (self.n + 1))
            Ra, Rc = self.A[rows], self.C[rows]
            deg = n
            for _ in range(order):
                Ra = (deg / dt) * np.diff(Ra, axis=0)
                Rc = (deg / dt) * np.diff(Rc, axis=0)
                deg -= 1
            rows_out.append(Ra)
            consts_out.append(Rc)
        return np.vstack(rows_out), np.vstack(consts_out)

    def free_from_curve(self, curve: PiecewiseBezier) -> np.ndarray:
        n = self.n
        free = []
        for seg in range(self.m):
            free.append(curve.control_points[seg, 3:, :])
        return np.concatenate(free, axis=0).reshape(-1)

    def curve_from_free(self, x: np.ndarray) -> PiecewiseBezier:
        P = self.A @ x.reshape(-1, 3) + self.C
        cps = P.reshape(self.m, self.n + 1, 3)
        knots = self.req.start_time + self.dt * np.arange(self.m + 1)
        return PiecewiseBezier(cps, knots)

    def build_qp(self, x_hat: np.ndarray, neighbors, trust_radius: float):
        req = self.req
        H = self.H_snap.copy()
        G_lin = self.G_snap.copy()

        endpoint = self.end_row @ x_hat.reshape(-1, 3) + self.end_const
        err = endpoint - req.goal
        w_goal = req.rho / (2.0 * max(float(np.linalg.norm(err)), 1e-3))
        H += w_goal * np.outer(self.end_row, self.end_row)
        G_lin += w_goal * self.end_row[:, None] * (self.end_const - req.goal)[None, :]

        w_rest = req.terminal_rest_weight
        if w_rest > 0:
            H += w_rest * np.outer(self.vend_row, self.vend_row)
            G_lin += w_rest * self.vend_row[:, None] * self.vend_const[None, :]

        # small quadratic damping for conditioning; the box below is the
        # actual trust region
        lam = 1e-6 * max(np.trace(H) / self.n_free, 1.0)
        H += lam * np.eye(self.n_free)
        G_lin += lam * (-x_hat.reshape(-1, 3))

        P_qp = 2.0 * np.kron(H, np.eye(3))
        q_qp = 2.0 * G_lin.reshape(-1)

        G_blocks, h_blocks = [], []
        n_scalar = 3 * self.n_free

        # trust-region box |x - x_hat| <= trust_radius per scalar coordinate
        eye = np.eye(n_scalar)
        G_blocks.append(eye)
        h_blocks.append(x_hat + trust_radius)
        G_blocks.append(-eye)
        h_blocks.append(trust_radius - x_hat)

        # linearized separation constraints about the current iterate
        d_eff = req.limits.d_min * req.distance_inflation
        F_hat = x_hat.reshape(-1, 3)
        ego_pts = self.colloc_rows @ F_hat + self.colloc_consts
        for nb in neighbors:
            nb_pts = nb.sample_clamped(self.colloc_times)
            diffs = ego_pts - nb_pts
            close = np.linalg.norm(diffs, axis=1) <= d_eff + CONSTRAINT_RADIUS
            if not close.any():
                continue
            dirs = _separating_directions(diffs[close])                     # (K, 3)
            rows = self.colloc_rows[close]                                  # (K, F)
            G_blocks.append(-(rows[:, :, None] * dirs[:, None, :]).reshape(len(dirs), -1))
            h_blocks.append(
                np.sum(dirs * (self.colloc_consts[close] - nb_pts[close]), axis=1) - d_eff
            )

        # tangent-plane velocity / acceleration caps at every derivative
        # control point, centered on the current iterate's directions
        for rows, consts, limit in (
            (self.vel_rows, self.vel_consts, req.limits.v_max),
            (self.acc_rows, self.acc_consts, req.limits.a_max),
        ):
            pts = rows @ F_hat + consts
            norms = np.linalg.norm(pts, axis=1)
            dirs = pts / np.maximum(norms[:, None], 1e-9)
            G_blocks.append((rows[:, :, None] * dirs[:, None, :]).reshape(len(rows), -1))
            h_blocks.append(limit - np.sum(dirs * consts, axis=1))

        return P_qp, q_qp, np.concatenate(G_blocks), np.concatenate(h_blocks)


def _solve_qp(P, q, G_rows, h_vals):
    if G_rows is None:
        return np.linalg.solve(P, -q)
    sol = cvx_solvers.qp(
        cvx_matrix(P), cvx_matrix(q),
        cvx_matrix(G_rows), cvx_matrix(h_vals),
        options={"show_progress": False, "maxiters": 60},
    )
    if sol["status"] not in ("optimal", "unknown"):
        raise RuntimeError(f"QP failed: {sol['status']}")
    x = np.array(sol["x"]).reshape(-1)
    if sol["status"] == "unknown" and not np.all(np.isfinite(x)):
        raise RuntimeError("QP returned non-finite iterate")
    return x


def _braking_fallback(req: PlanRequest) -> PiecewiseBezier:
    """Pure braking profile used when no collision-free iterate was found."""
    coeffs = _quintic_rest_poly(
        req.position, req.velocity, req.acceleration,
        req.position + 0.35 * req.velocity * req.horizon, req.horizon,
    )
    return _poly_to_piecewise(coeffs, req.horizon, req.segments, req.degree, req.start_time)


def plan(req: PlanRequest) -> PlanResult:
    """Run the anytime sequential-convexification loop for one UAV."""
    t0 = time.perf_counter()
    guess = initial_guess(req)
    neighbors = _prune_neighbors(req)

    cur = _evaluate_iterate(guess, req, neighbors)
    best, best_cost = (guess, cur.cost) if cur.feasible else (None, np.inf)
    cur_merit = cur.merit(req)

    sub = _Subproblem(req)
    x_hat = sub.free_from_curve(guess)
    trust = 0.8
    trace = [best_cost if best is not None else cur.cost]
    durations: list[float] = []
    iters = 0
    failures = 0
    status = "budget"

    def out_of_budget() -> bool:
        if req.deterministic_iterations is not None:
            return iters >= req.deterministic_iterations
        return time.perf_counter() - t0 >= req.budget

    while not out_of_budget():
        it0 = time.perf_counter()
        P_qp, q_qp, G_rows, h_vals = sub.build_qp(x_hat, neighbors, trust)
        try:
            x_new = _solve_qp(P_qp, q_qp, G_rows, h_vals)
        except (RuntimeError, ArithmeticError, np.linalg.LinAlgError, ValueError):
            failures += 1
            trust *= 0.5
            durations.append(time.perf_counter() - it0)
            iters += 1
            trace.append(trace[-1])
            if failures >= 3:
                status = "solver-failures"
                break
            continue

        candidate = sub.curve_from_free(x_new)
        cand = _evaluate_iterate(candidate, req, neighbors)
        if cand.feasible and cand.cost < best_cost:
            best, best_cost = candidate, cand.cost
        cand_merit = cand.merit(req)
        step = float(np.max(np.abs(x_new - x_hat))) if x_new.size else 0.0
        if cand_merit <= cur_merit + 1e-9:
            x_hat = x_new
            cur_merit = cand_merit
            trust = min(trust * 1.5, 1.5)
        else:
            trust *= 0.5
        iters += 1
        durations.append(time.perf_counter() - it0)
        trace.append(best_cost if best is not None else trace[0])
        if step < 1e-5 or trust < 0.02:
            status = "converged"
            break

    elapsed = time.perf_counter() - t0
    if best is not None:
        return PlanResult(best, True, iters, best_cost, elapsed, trace, durations, status)
    fallback = _braking_fallback(req)
    return PlanResult(fallback, False, iters, _true_cost(fallback, req),
                      elapsed, trace, durations, status)


def receding_horizon_step(
    position,
    velocity,
    acceleration,
    goal,
    theta,
    committed_neighbors,
    clock: float,
    limits: KinematicLimits,
    rho: float = 100.0,
    degree: int = 5,
    collocation_per_segment: int = 4,
    distance_inflation: float = 1.4,
    terminal_rest_weight: float = 1.0,
    deterministic_iterations: int | None = None,
) -> PlanResult:
    """Build a request from the tunable triple and plan one horizon.

    The caller owns commitment bookkeeping: the returned trajectory is
    exactly what other agents must see at the next replanning round.
    """
    req = PlanRequest(
        position=position,
        velocity=velocity,
        acceleration=acceleration,
        goal=goal,
        horizon=theta.horizon,
        segments=theta.m,
        budget=theta.delta_opt,
        start_time=clock,
        neighbors=tuple(committed_neighbors),
        limits=limits,
        rho=rho,
        degree=degree,
        collocation_per_segment=collocation_per_segment,
        distance_inflation=distance_inflation,
        terminal_rest_weight=terminal_rest_weight,
        deterministic_iterations=deterministic_iterations,
    )
    return plan(req)
