"""Multi-task Gaussian process over input-task pairs.

Task relatedness is modeled with an intrinsic coregionalization matrix
B = W W^T + diag(kappa); the joint kernel of records ((x, t), (y, u)) is
B[t, u] * k_x(x, y) with the Matern-3/2 ARD input kernel from
:mod:`uavtune.gp`.  For a full (task x input) grid ordered task-major the
joint Gram equals kron(B_grid, K_inputs).

Inference runs on the dense joint system; the data sizes here (a few
hundred records) keep that cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize

from .gp import (
    LOG_LS_BOUNDS,
    LOG_NOISE_BOUNDS,
    SQRT3,
    KernelParams,
    ModelError,
    chol_with_jitter,
    matern32,
    matern32_matrix,
    scaled_dists,
)

W_BOUNDS = (-3.0, 3.0)
KAPPA_RAW_BOUNDS = (-8.0, 3.0)
KAPPA_FLOOR = 1e-6


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    return np.log(np.expm1(np.maximum(y, 1e-12)))


@dataclass(frozen=True)
class IcmParams:
    """Low-rank-plus-diagonal task covariance B = W W^T + diag(kappa)."""

    factor: np.ndarray      # (T, R)
    diag: np.ndarray        # (T,), non-negative

    def __post_init__(self):
        object.__setattr__(self, "factor", np.atleast_2d(np.asarray(self.factor, dtype=float)))
        object.__setattr__(self, "diag", np.asarray(self.diag, dtype=float))
        if self.factor.shape[0] != self.diag.shape[0]:
            raise ValueError("factor rows and diag length must match the task count")
        if np.any(self.diag < 0):
            raise ValueError("diagonal additions must be non-negative")
        if np.any(np.diag(self.task_covariance()) <= 0):
            raise ValueError("task covariance must have strictly positive diagonal")

    @property
    def n_tasks(self) -> int:
        return self.factor.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def task_covariance(self) -> np.ndarray:
        return self.factor @ self.factor.T + np.diag(self.diag)

    @classmethod
    def identity(cls, n_tasks: int, rank: int = 2) -> "IcmParams":
        return cls(factor=np.zeros((n_tasks, rank)), diag=np.ones(n_tasks))


@dataclass(frozen=True)
class MtDataset:
    """Observation records for the joint model: inputs, task ids, values."""

    X: np.ndarray           # (n, d) unit-cube inputs
    tasks: np.ndarray       # (n,) integer task ids
    y: np.ndarray           # (n,)

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=float)))
        object.__setattr__(self, "tasks", np.asarray(self.tasks, dtype=int))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if not (self.X.shape[0] == self.tasks.shape[0] == self.y.shape[0]):
            raise ValueError("X, tasks and y must have equal lengths")
        if self.X.shape[0] and not np.all(np.isfinite(self.y)):
            raise ValueError("observed values must be finite")

    @property
    def n(self) -> int:
        return self.X.shape[0]


def k_multi(x, t: int, y, u: int, kp: KernelParams, ip: IcmParams) -> float:
    """Joint kernel value B[t, u] * k_x(x, y)."""
    T = ip.n_tasks
    if not (0 <= t < T and 0 <= u < T):
        raise IndexError(f"task index out of range: ({t}, {u}) with T={T}")
    B = ip.task_covariance()
    return float(B[t, u]) * matern32(x, y, kp)


def joint_gram(
    X: np.ndarray, tasks: np.ndarray, kp: KernelParams, ip: IcmParams
) -> np.ndarray:
    """Dense joint Gram matrix over the given input-task records (no noise)."""
    B = ip.task_covariance()
    return B[np.ix_(tasks, tasks)] * matern32_matrix(X, X, kp)


def _noise_per_record(noise, tasks: np.ndarray, n_tasks: int) -> np.ndarray:
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 0:
        return np.full(tasks.shape[0], float(noise))
    if noise.shape != (n_tasks,):
        raise ValueError(f"per-task noise must have shape ({n_tasks},)")
    return noise[tasks]


@dataclass(frozen=True)
class MtgpPosterior:
    """Joint posterior over input-task pairs, immutable after fitting."""

    X: np.ndarray
    tasks: np.ndarray
    kernel: KernelParams
    icm: IcmParams
    noise: np.ndarray           # scalar or per-task vector, as given
    chol: tuple[np.ndarray, bool]
    alpha: np.ndarray
    y_shift: float
    y_scale: float
    jitter: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.icm.n_tasks

    def _cross_cov_rows(self, Xs: np.ndarray, t: int) -> np.ndarray:
        """k((x, t), training records) for each x in Xs, shape (N, n)."""
        B = self.icm.task_covariance()
        return matern32_matrix(Xs, self.X, self.kernel) * B[t, self.tasks][None, :]

    def predict(self, x: np.ndarray, t: int) -> tuple[float, float]:
        mean, var = self.predict_batch(np.atleast_2d(x), t)
        return float(mean[0]), float(var[0])

    def predict_batch(self, Xs: np.ndarray, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Task-specific posterior mean and variance at many inputs."""
        self._check_task(t)
        B = self.icm.task_covariance()
        k_star = self._cross_cov_rows(np.atleast_2d(Xs), t)
        mean_std = k_star @ self.alpha
        v = cho_solve(self.chol, k_star.T)
        var_std = B[t, t] * self.kernel.signal_variance - np.sum(k_star.T * v, axis=0)
        return (
            self.y_shift + self.y_scale * mean_std,
            self.y_scale**2 * np.maximum(var_std, 0.0),
        )

    def predict_cross(self, x: np.ndarray, t: int, u: int) -> float:
        """Posterior covariance between tasks t and u at the shared input x."""
        self._check_task(t)
        self._check_task(u)
        B = self.icm.task_covariance()
        x = np.atleast_2d(x)
        k_t = self._cross_cov_rows(x, t)[0]
        k_u = self._cross_cov_rows(x, u)[0]
        prior = B[t, u] * self.kernel.signal_variance
        cov = prior - k_t @ cho_solve(self.chol, k_u)
        return float(self.y_scale**2 * cov)

    def predict_all_tasks(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Means (T,) and posterior task covariance (T, T) at one input."""
        B = self.icm.task_covariance()
        x = np.atleast_2d(x)
        kx = matern32_matrix(x, self.X, self.kernel)[0]         # (n,)
        C = B[:, self.tasks] * kx[None, :]                      # (T, n)
        means = self.y_shift + self.y_scale * (C @ self.alpha)
        V = cho_solve(self.chol, C.T)                           # (n, T)
        cov = B * self.kernel.signal_variance - C @ V
        return means, self.y_scale**2 * cov

    def avg_objective(self, x: np.ndarray) -> tuple[float, float]:
        """Mean and variance of the across-task average objective at x."""
        mean, var = self.avg_objective_batch(np.atleast_2d(x))
        return float(mean[0]), float(var[0])

    def avg_objective_batch(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Averaged-objective mean/variance at many inputs.

        The variance is the full double sum of posterior cross-task
        covariances divided by T^2, evaluated through the collapsed vector
        sum_t k_t / T so only one solve per batch is needed.
        """
        B = self.icm.task_covariance()
        T = self.n_tasks
        Xs = np.atleast_2d(Xs)
        A = matern32_matrix(Xs, self.X, self.kernel)            # (N, n)
        avg_b = B.mean(axis=0)                                  # (1/T) sum_t B[t, :]
        bvec = A * avg_b[self.tasks][None, :]                   # (N, n)
        mean_std = bvec @ self.alpha
        V = cho_solve(self.chol, bvec.T)
        prior = B.sum() / T**2 * self.kernel.signal_variance
        var_std = prior - np.sum(bvec.T * V, axis=0)
        return (
            self.y_shift + self.y_scale * mean_std,
            self.y_scale**2 * np.maximum(var_std, 0.0),
        )

    def _check_task(self, t: int):
        if not 0 <= t < self.n_tasks:
            raise IndexError(f"task index {t} out of range (T={self.n_tasks})")


def mtgp_fit(
    data: MtDataset,
    kp: KernelParams,
    ip: IcmParams,
    noise=None,
    standardize: bool = True,
) -> MtgpPosterior:
    """Fit the joint posterior; ``noise`` overrides kp.noise_variance and may
    be a per-task vector (independent noise per task)."""
    if data.n == 0:
        raise ValueError("at least one observation is required")
    if data.tasks.size and (data.tasks.min() < 0 or data.tasks.max() >= ip.n_tasks):
        raise IndexError("task id out of range for the coregionalization matrix")
    noise = kp.noise_variance if noise is None else noise
    noise_vec = _noise_per_record(noise, data.tasks, ip.n_tasks)

    if standardize:
        y_shift = float(np.mean(data.y))
        spread = float(np.std(data.y))
        y_scale = spread if spread > 1e-12 else 1.0
    else:
        y_shift, y_scale = 0.0, 1.0
    y_std = (data.y - y_shift) / y_scale

    K = joint_gram(data.X, data.tasks, kp, ip) + np.diag(noise_vec)
    factor, jitter = chol_with_jitter(K)
    alpha = cho_solve(factor, y_std)
    return MtgpPosterior(
        X=data.X, tasks=data.tasks, kernel=kp, icm=ip,
        noise=np.asarray(noise, dtype=float),
        chol=factor, alpha=alpha, y_shift=y_shift, y_scale=y_scale, jitter=jitter,
    )


# ---------------------------------------------------------------------------
# Joint marginal likelihood and hyperparameter fitting
# ---------------------------------------------------------------------------
#
# The fit freezes the input-kernel signal variance at 1: the task covariance
# already carries per-task amplitudes, so a free signal variance would be
# unidentifiable.  kappa is kept positive via a softplus transform.

def _unpack(z: np.ndarray, d: int, T: int, R: int, per_task_noise: bool):
    ls = np.exp(z[:d])
    W = z[d:d + T * R].reshape(T, R)
    kappa = _softplus(z[d + T * R:d + T * R + T]) + KAPPA_FLOOR
    noise = np.exp(z[d + T * R + T:])
    kp = KernelParams(length_scales=ls, signal_variance=1.0, noise_variance=float(noise[0]))
    ip = IcmParams(factor=W, diag=kappa)
    noise_out = noise if per_task_noise else float(noise[0])
    return kp, ip, noise_out


def mt_nlml_and_grad(
    z: np.ndarray, data: MtDataset, d: int, T: int, R: int, per_task_noise: bool
) -> tuple[float, np.ndarray]:
    """Negative log marginal likelihood of the joint model and its gradient."""
    kp, ip, noise = _unpack(z, d, T, R, per_task_noise)
    n = data.n
    X, tasks, y = data.X, data.tasks, data.y

    r = scaled_dists(X, X, kp.length_scales)
    decay = np.exp(-SQRT3 * r)
    M = (1.0 + SQRT3 * r) * decay
    B = ip.task_covariance()
    Bmat = B[np.ix_(tasks, tasks)]
    noise_vec = _noise_per_record(noise, tasks, T)
    K = Bmat * M + np.diag(noise_vec)

    factor, _ = chol_with_jitter(K)
    alpha = cho_solve(factor, y)
    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    nlml = 0.5 * float(y @ alpha) + 0.5 * log_det + 0.5 * n * math.log(2.0 * math.pi)

    K_inv = cho_solve(factor, np.eye(n))
    inner = np.outer(alpha, alpha) - K_inv        # dLML/dtheta = 0.5 sum(inner * dK)

    grads = np.empty_like(z)
    for k in range(d):
        diff = (X[:, k][:, None] - X[:, k][None, :]) / kp.length_scales[k]
        grads[k] = 0.5 * np.sum(inner * (Bmat * (3.0 * diff**2 * decay)))

    # Task-covariance derivatives share the record->task aggregation
    # Stt[a, b] = sum over records with tasks (a, b) of (inner * M).
    S = inner * M
    onehot = np.zeros((n, T))
    onehot[np.arange(n), tasks] = 1.0
    Stt = onehot.T @ S @ onehot
    grads[d:d + T * R] = (Stt @ ip.factor).ravel()
    kraw = z[d + T * R:d + T * R + T]
    grads[d + T * R:d + T * R + T] = 0.5 * np.diag(Stt) / (1.0 + np.exp(-kraw))

    diag_inner = np.diag(inner)
    if per_task_noise:
        for a in range(T):
            grads[d + T * R + T + a] = 0.5 * noise[a] * diag_inner[tasks == a].sum()
    else:
        grads[d + T * R + T] = 0.5 * float(noise) * diag_inner.sum()
    return nlml, -grads


def fit_mt_hyperparams(
    data: MtDataset,
    n_tasks: int,
    rank: int = 2,
    restarts: int = 8,
    seed: int = 0,
    per_task_noise: bool = False,
    fix_icm: IcmParams | None = None,
    standardize: bool = True,
):
    """Maximize the joint marginal likelihood over kernel and ICM parameters.

    Returns ``(KernelParams, IcmParams, noise)`` where noise is a scalar or,
    with ``per_task_noise``, a length-T vector.  ``fix_icm`` pins the task
    covariance (used to force independent tasks) and removes its parameters
    from the search.  Fitting operates on standardized values by default,
    matching how campaign posteriors are built.
    """
    if data.n < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    d = data.X.shape[1]
    T, R = n_tasks, rank

    if standardize:
        spread = float(np.std(data.y))
        scale = spread if spread > 1e-12 else 1.0
        work = MtDataset(X=data.X, tasks=data.tasks, y=(data.y - np.mean(data.y)) / scale)
    else:
        work = data

    if fix_icm is not None:
        return _fit_with_fixed_icm(work, fix_icm, d, T, restarts, seed, per_task_noise)

    n_noise = T if per_task_noise else 1
    bounds = (
        [LOG_LS_BOUNDS] * d
        + [W_BOUNDS] * (T * R)
        + [KAPPA_RAW_BOUNDS] * T
        + [LOG_NOISE_BOUNDS] * n_noise
    )
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(z):
        try:
            return mt_nlml_and_grad(z, work, d, T, R, per_task_noise)
        except ModelError:
            return 1e12, np.zeros_like(z)

    rng = np.random.default_rng(seed)
    kraw_mid = float(_softplus_inv(np.array(0.5))[()])
    z_base = np.concatenate([
        np.full(d, math.log(0.3)),
        rng.normal(0.0, 0.5, T * R),
        np.full(T, kraw_mid),
        np.full(n_noise, math.log(1e-2)),
    ])
    starts = [np.clip(z_base, lo, hi)]
    for _ in range(restarts):
        z = np.concatenate([
            rng.uniform(math.log(0.05), math.log(2.0), d),
            rng.normal(0.0, 0.8, T * R),
            rng.uniform(-2.0, 1.0, T),
            rng.uniform(math.log(1e-4), math.log(0.5), n_noise),
        ])
        starts.append(np.clip(z, lo, hi))

    best = None
    for start in starts:
        try:
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds)
        except (ModelError, np.linalg.LinAlgError):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise ModelError("all multi-task hyperparameter restarts failed")
    return _unpack(best.x, d, T, R, per_task_noise)


def _fit_with_fixed_icm(work, icm, d, T, restarts, seed, per_task_noise):
    n_noise = T if per_task_noise else 1
    bounds = [LOG_LS_BOUNDS] * d + [LOG_NOISE_BOUNDS] * n_noise
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(z):
        kp = KernelParams(length_scales=np.exp(z[:d]), signal_variance=1.0,
                          noise_variance=float(np.exp(z[d])))
        noise = np.exp(z[d:]) if per_task_noise else float(np.exp(z[d]))
        try:
            K = joint_gram(work.X, work.tasks, kp, icm) + np.diag(
                _noise_per_record(noise, work.tasks, T))
            factor, _ = chol_with_jitter(K)
            alpha = cho_solve(factor, work.y)
            nlml = (0.5 * float(work.y @ alpha)
                    + np.sum(np.log(np.diag(factor[0])))
                    + 0.5 * work.n * math.log(2.0 * math.pi))
        except ModelError:
            return 1e12
        return nlml

    rng = np.random.default_rng(seed)
    starts = [np.clip(np.concatenate([np.full(d, math.log(0.3)),
                                      np.full(n_noise, math.log(1e-2))]), lo, hi)]
    for _ in range(restarts):
        starts.append(rng.uniform(lo, hi))
    best = None
    for start in starts:
        res = minimize(objective, start, method="L-BFGS-B", bounds=bounds)
        if best is None or res.fun < best.fun:
            best = res
    kp = KernelParams(length_scales=np.exp(best.x[:d]), signal_variance=1.0,
                      noise_variance=float(np.exp(best.x[d])))
    noise = np.exp(best.x[d:]) if per_task_noise else float(np.exp(best.x[d]))
    return kp, icm, noise
