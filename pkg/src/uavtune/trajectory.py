"""Piecewise Bernstein-basis (Bezier) trajectories in 3D.

Each segment holds n+1 control points; segment l maps t in [t_l, t_{l+1}]
to u = (t - t_l)/(t_{l+1} - t_l) and evaluates sum_k C(n,k) u^k (1-u)^(n-k) P_k.
Curves interpolate their end control points and stay inside the convex hull
of each segment's control polygon, which is what the conservative
velocity/acceleration certificates below rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import comb


@lru_cache(maxsize=32)
def _binomials(n: int) -> np.ndarray:
    return comb(n, np.arange(n + 1))


@lru_cache(maxsize=256)
def _uniform_basis(degree: int, count: int) -> np.ndarray:
    return bernstein_basis(degree, np.linspace(0.0, 1.0, count))


@dataclass(frozen=True)
class KinematicLimits:
    """Box of kinematic bounds shared by planner and simulator."""

    v_max: float = 5.0
    a_max: float = 10.0
    d_min: float = 0.6

    def __post_init__(self):
        if min(self.v_max, self.a_max, self.d_min) <= 0:
            raise ValueError("kinematic limits must be positive")


def bernstein_basis(n: int, u: np.ndarray) -> np.ndarray:
    """Basis values C(n,k) u^k (1-u)^(n-k) for k = 0..n, shape (len(u), n+1)."""
    u = np.asarray(u, dtype=float)[:, None]
    k = np.arange(n + 1)
    return _binomials(n)[None, :] * u**k * (1.0 - u) ** (n - k)


@lru_cache(maxsize=16)
def _monomial_to_bezier_matrix(degree: int) -> np.ndarray:
    M = np.zeros((degree + 1, degree + 1))
    for k in range(degree + 1):
        for j in range(k + 1):
            M[k, j] = comb(k, j) / comb(degree, j)
    return M


def monomial_to_bezier(coeffs: np.ndarray, degree: int) -> np.ndarray:
    """Convert p(u) = sum_j a_j u^j (u in [0,1]) to Bezier control values.

    ``coeffs`` has shape (j_max+1, ...) with j_max <= degree; returns
    (degree+1, ...) control values b_k = sum_{j<=k} C(k,j)/C(degree,j) a_j.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    padded = np.zeros((degree + 1,) + coeffs.shape[1:])
    padded[: coeffs.shape[0]] = coeffs
    return _monomial_to_bezier_matrix(degree) @ padded


@dataclass(frozen=True)
class PiecewiseBezier:
    """m segments of (n+1) 3D control points over strictly increasing knots."""

    control_points: np.ndarray      # (m, n+1, 3)
    knots: np.ndarray               # (m+1,)

    def __post_init__(self):
        cp = np.asarray(self.control_points, dtype=float)
        if cp.ndim != 3 or cp.shape[2] != 3:
            raise ValueError("control_points must have shape (segments, degree+1, 3)")
        knots = np.asarray(self.knots, dtype=float)
        if knots.shape != (cp.shape[0] + 1,):
            raise ValueError("need one more knot than segments")
        if np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        object.__setattr__(self, "control_points", cp)
        object.__setattr__(self, "knots", knots)

    @property
    def n_segments(self) -> int:
        return self.control_points.shape[0]

    @property
    def degree(self) -> int:
        return self.control_points.shape[1] - 1

    @property
    def start_time(self) -> float:
        return float(self.knots[0])

    @property
    def end_time(self) -> float:
        return float(self.knots[-1])

    @property
    def durations(self) -> np.ndarray:
        return np.diff(self.knots)

    def _locate(self, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.searchsorted(self.knots, times, side="right") - 1
        idx = np.clip(idx, 0, self.n_segments - 1)
        u = (times - self.knots[idx]) / self.durations[idx]
        return idx, u

    def sample(self, times: np.ndarray) -> np.ndarray:
        """Positions at the given times (must lie within the knot span)."""
        times = np.asarray(times, dtype=float)
        eps = 1e-9 * max(1.0, abs(self.end_time))
        if np.any(times < self.start_time - eps) or np.any(times > self.end_time + eps):
            raise ValueError(
                f"time outside [{self.start_time}, {self.end_time}]"
            )
        idx, u = self._locate(np.clip(times, self.start_time, self.end_time))
        basis = bernstein_basis(self.degree, u)                     # (N, n+1)
        return np.einsum("nk,nkd->nd", basis, self.control_points[idx])

    def position(self, t: float) -> np.ndarray:
        return self.sample(np.array([t]))[0]

    def sample_clamped(self, times: np.ndarray) -> np.ndarray:
        """Positions with times clamped to the knot span (hold both ends)."""
        times = np.clip(np.asarray(times, dtype=float), self.start_time, self.end_time)
        return self.sample(times)

    def sample_dense(self, per_segment: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform per-segment sampling; returns (times, positions)."""
        basis = _uniform_basis(self.degree, per_segment)            # (S, n+1)
        pts = np.einsum("sk,mkd->msd", basis, self.control_points)
        u = np.linspace(0.0, 1.0, per_segment)
        times = self.knots[:-1, None] + u[None, :] * self.durations[:, None]
        return times.reshape(-1), pts.reshape(-1, 3)

    def derivative(self) -> "PiecewiseBezier":
        """Derivative curve; control points n (P_{k+1} - P_k) / segment duration."""
        n = self.degree
        if n == 0:
            return PiecewiseBezier(np.zeros_like(self.control_points), self.knots)
        diff = np.diff(self.control_points, axis=1) * n
        diff = diff / self.durations[:, None, None]
        return PiecewiseBezier(diff, self.knots)

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(position, velocity, acceleration) at time t, clamped to the span.

        Outside the span the curve is treated as holding its end position
        at rest.
        """
        if t <= self.start_time or t >= self.end_time:
            tc = self.start_time if t <= self.start_time else self.end_time
            if t != tc:
                return self.position(tc), np.zeros(3), np.zeros(3)
            t = tc
        vel = self.derivative()
        acc = vel.derivative()
        return self.position(t), vel.position(t), acc.position(t)

    def c2_error(self) -> float:
        """Worst junction mismatch across position, velocity and acceleration."""
        worst = 0.0
        for curve in (self, self.derivative(), self.derivative().derivative()):
            for l in range(curve.n_segments - 1):
                gap = curve.control_points[l, -1] - curve.control_points[l + 1, 0]
                worst = max(worst, float(np.linalg.norm(gap)))
        return worst

    def elevated(self, degree: int) -> "PiecewiseBezier":
        """Exact degree elevation to the requested (>= current) degree."""
        if degree < self.degree:
            raise ValueError("cannot lower degree by elevation")
        cp = self.control_points
        for n in range(self.degree, degree):
            m, _, _ = cp.shape
            new = np.zeros((m, n + 2, 3))
            k = np.arange(n + 2)[None, :, None]
            padded_lo = np.concatenate([np.zeros((m, 1, 3)), cp], axis=1)
            padded_hi = np.concatenate([cp, np.zeros((m, 1, 3))], axis=1)
            new = (k / (n + 1)) * padded_lo + (1 - k / (n + 1)) * padded_hi
            cp = new
        return PiecewiseBezier(cp, self.knots)


def hold_trajectory(point: np.ndarray, t0: float, duration: float = 2.0) -> PiecewiseBezier:
    """Degenerate curve holding one position (used as an initial commitment)."""
    cp = np.tile(np.asarray(point, dtype=float), (1, 2, 1))
    return PiecewiseBezier(cp, np.array([t0, t0 + duration]))


@dataclass(frozen=True)
class LimitReport:
    """Outcome of a kinematic bound check; methods are 'hull' or 'sampled'."""

    v_ok: bool
    a_ok: bool
    max_v_bound: float
    max_a_bound: float
    v_method: str
    a_method: str

    @property
    def ok(self) -> bool:
        return self.v_ok and self.a_ok


def _bound_check(curve: PiecewiseBezier, limit: float, samples_per_segment: int = 200):
    norms = np.linalg.norm(curve.control_points, axis=2)
    hull_max = float(norms.max())
    if hull_max <= limit:
        # Convex hull certificate: every curve point is a convex combination
        # of control points, so its norm cannot exceed the largest one.
        return True, hull_max, "hull"
    _, pts = curve.sample_dense(samples_per_segment)
    sampled_max = float(np.linalg.norm(pts, axis=1).max())
    return sampled_max <= limit, sampled_max, "sampled"


def check_limits(traj: PiecewiseBezier, limits: KinematicLimits) -> LimitReport:
    """Certify velocity/acceleration bounds via the control-point hull,
    falling back to dense sampling when the hull is inconclusive."""
    vel = traj.derivative()
    acc = vel.derivative()
    v_ok, v_bound, v_method = _bound_check(vel, limits.v_max)
    a_ok, a_bound, a_method = _bound_check(acc, limits.a_max)
    return LimitReport(v_ok, a_ok, v_bound, a_bound, v_method, a_method)


def _bernstein_product_gram(q: int) -> np.ndarray:
    """Gram matrix of degree-q Bernstein bases: integral over [0,1] of B_j B_k."""
    j = np.arange(q + 1)
    G = comb(q, j)[:, None] * comb(q, j)[None, :] / comb(2 * q, j[:, None] + j[None, :])
    return G / (2 * q + 1)


@lru_cache(maxsize=16)
def _snap_diff_operator(n: int) -> np.ndarray:
    """Fourth-difference operator with degree factors (durations applied later)."""
    D = np.eye(n + 1)
    deg = n
    for _ in range(4):
        if deg == 0:
            return np.zeros((1, n + 1))
        step = np.zeros((deg, deg + 1))
        idx = np.arange(deg)
        step[idx, idx] = -deg
        step[idx, idx + 1] = deg
        D = step @ D
        deg -= 1
    return D


def snap_cost(traj: PiecewiseBezier) -> float:
    """Exact integral of the squared fourth-derivative norm over the curve."""
    n = traj.degree
    D = _snap_diff_operator(n)
    if not D.any():
        return 0.0
    snap_pts = np.einsum("qk,mkd->mqd", D, traj.control_points)
    snap_pts = snap_pts / traj.durations[:, None, None] ** 4
    G = _bernstein_product_gram(max(n - 4, 0))
    per_segment = np.einsum("jk,mjd,mkd->m", G, snap_pts, snap_pts)
    return float(np.sum(per_segment * traj.durations))
