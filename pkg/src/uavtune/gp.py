"""Single-output Gaussian process regression with a Matern-3/2 ARD kernel.

Exact inference via Cholesky factorization of the noisy Gram matrix.
Observations can be standardized to zero mean / unit variance inside the
model (robustness default; the prior mean is zero either way) and are
de-standardized on prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize

SQRT3 = math.sqrt(3.0)

# Escalating diagonal jitter applied when the Cholesky factorization fails.
JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

LOG_LS_BOUNDS = (math.log(1e-2), math.log(1e2))
LOG_SIGNAL_BOUNDS = (math.log(1e-4), math.log(1e3))
LOG_NOISE_BOUNDS = (math.log(1e-8), math.log(1e1))


class ModelError(RuntimeError):
    """Numerical failure of the GP machinery (conditioning, all restarts failed)."""


@dataclass(frozen=True)
class KernelParams:
    """ARD Matern-3/2 hyperparameters."""

    length_scales: np.ndarray
    signal_variance: float = 1.0
    noise_variance: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "length_scales", np.asarray(self.length_scales, dtype=float))
        if np.any(self.length_scales <= 0):
            raise ValueError("length scales must be positive")
        if self.signal_variance <= 0:
            raise ValueError("signal variance must be positive")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.length_scales.shape[0]


def scaled_dists(X: np.ndarray, Y: np.ndarray, length_scales: np.ndarray) -> np.ndarray:
    """Pairwise ARD-scaled Euclidean distances, shape (len(X), len(Y))."""
    Xs = np.atleast_2d(X) / length_scales
    Ys = np.atleast_2d(Y) / length_scales
    sq = (
        np.sum(Xs**2, axis=1)[:, None]
        + np.sum(Ys**2, axis=1)[None, :]
        - 2.0 * Xs @ Ys.T
    )
    return np.sqrt(np.maximum(sq, 0.0))


def matern32_matrix(X: np.ndarray, Y: np.ndarray, params: KernelParams) -> np.ndarray:
    """Matern-3/2 cross-covariance matrix k(X, Y)."""
    r = scaled_dists(X, Y, params.length_scales)
    return params.signal_variance * (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)


def matern32(x: np.ndarray, y: np.ndarray, params: KernelParams) -> float:
    """Matern-3/2 kernel between two points: sigma_f^2 (1 + sqrt(3) r) exp(-sqrt(3) r)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.shape[-1] != params.dim:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape} vs d={params.dim}")
    return float(matern32_matrix(x[None, :], y[None, :], params)[0, 0])


def chol_with_jitter(K: np.ndarray) -> tuple[tuple[np.ndarray, bool], float]:
    """Cholesky-factor a nominally-PSD matrix, escalating jitter on failure."""
    n = K.shape[0]
    for jitter in JITTER_LADDER:
        try:
            factor = cho_factor(K + jitter * np.eye(n), lower=True)
            return factor, jitter
        except np.linalg.LinAlgError:
            continue
    raise ModelError(
        f"matrix of size {n} not positive definite after jitter up to {JITTER_LADDER[-1]:g}"
    )


@dataclass(frozen=True)
class GpPosterior:
    """Fitted GP state: training inputs, Cholesky factor of K + noise, weights."""

    X: np.ndarray
    params: KernelParams
    chol: tuple[np.ndarray, bool]
    alpha: np.ndarray
    y_shift: float
    y_scale: float
    jitter: float

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def predict(self, x: np.ndarray) -> tuple[float, float]:
        """Posterior mean and variance at a single point."""
        mean, var = self.predict_batch(np.atleast_2d(x))
        return float(mean[0]), float(var[0])

    def predict_batch(self, Xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and (clamped non-negative) variance at many points."""
        Xs = np.atleast_2d(Xs)
        k_star = matern32_matrix(Xs, self.X, self.params)       # (N, n)
        mean_std = k_star @ self.alpha
        v = cho_solve(self.chol, k_star.T)                      # (n, N)
        var_std = self.params.signal_variance - np.sum(k_star.T * v, axis=0)
        var_std = np.maximum(var_std, 0.0)
        mean = self.y_shift + self.y_scale * mean_std
        var = self.y_scale**2 * var_std
        return mean, var


def fit_gp(
    X: np.ndarray,
    y: np.ndarray,
    params: KernelParams,
    standardize: bool = True,
) -> GpPosterior:
    """Fit the exact GP posterior to observations (zero prior mean).

    With ``standardize`` the observations are shifted/scaled to zero mean and
    unit variance before entering the linear algebra; predictions are mapped
    back.  Noise and signal variances then live on the standardized scale.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y must have the same number of rows")
    if X.shape[0] == 0:
        raise ValueError("at least one observation is required")
    if X.shape[1] != params.dim:
        raise ValueError(f"input dimension {X.shape[1]} != kernel dimension {params.dim}")

    if standardize:
        y_shift = float(np.mean(y))
        spread = float(np.std(y))
        y_scale = spread if spread > 1e-12 else 1.0
    else:
        y_shift, y_scale = 0.0, 1.0
    y_std = (y - y_shift) / y_scale

    K = matern32_matrix(X, X, params) + params.noise_variance * np.eye(X.shape[0])
    factor, jitter = chol_with_jitter(K)
    alpha = cho_solve(factor, y_std)
    return GpPosterior(
        X=X, params=params, chol=factor, alpha=alpha,
        y_shift=y_shift, y_scale=y_scale, jitter=jitter,
    )


# ---------------------------------------------------------------------------
# Marginal likelihood and hyperparameter fitting
# ---------------------------------------------------------------------------

def log_marginal_likelihood(X: np.ndarray, y: np.ndarray, params: KernelParams) -> float:
    """Exact log marginal likelihood of ``y`` under the zero-mean GP prior."""
    value, _ = _lml_and_grad(
        np.atleast_2d(np.asarray(X, dtype=float)),
        np.asarray(y, dtype=float).ravel(),
        params,
    )
    return value


def _lml_and_grad(X: np.ndarray, y: np.ndarray, params: KernelParams) -> tuple[float, np.ndarray]:
    """LML and its gradient w.r.t. log [length_scales..., signal_var, noise_var]."""
    n, d = X.shape
    r = scaled_dists(X, X, params.length_scales)
    decay = np.exp(-SQRT3 * r)
    M = (1.0 + SQRT3 * r) * decay                       # unit-variance Matern part
    K = params.signal_variance * M + params.noise_variance * np.eye(n)
    factor, jitter = chol_with_jitter(K)
    alpha = cho_solve(factor, y)

    log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
    lml = -0.5 * float(y @ alpha) - 0.5 * log_det - 0.5 * n * math.log(2.0 * math.pi)

    K_inv = cho_solve(factor, np.eye(n))
    # dLML/dtheta = 0.5 alpha^T dK alpha - 0.5 tr(K^-1 dK), evaluated via
    # elementwise products: tr(A B) = sum(A * B^T) with symmetric B here.
    inner = np.outer(alpha, alpha) - K_inv

    grads = np.empty(d + 2)
    for k in range(d):
        diff = (X[:, k][:, None] - X[:, k][None, :]) / params.length_scales[k]
        dK = params.signal_variance * 3.0 * diff**2 * decay   # d/d log(ls_k)
        grads[k] = 0.5 * np.sum(inner * dK)
    grads[d] = 0.5 * np.sum(inner * (params.signal_variance * M))
    grads[d + 1] = 0.5 * np.trace(inner) * params.noise_variance
    return lml, grads


def _params_from_log(z: np.ndarray, d: int) -> KernelParams:
    return KernelParams(
        length_scales=np.exp(z[:d]),
        signal_variance=float(np.exp(z[d])),
        noise_variance=float(np.exp(z[d + 1])),
    )


def fit_hyperparams(
    X: np.ndarray,
    y: np.ndarray,
    init: KernelParams,
    restarts: int = 8,
    seed: int = 0,
) -> KernelParams:
    """Maximize the marginal likelihood by multi-start L-BFGS on log-parameters.

    The returned parameters never score below ``init``; ``restarts`` extra
    starting points are drawn log-uniformly inside the optimizer bounds.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] < 2:
        raise ValueError("hyperparameter fitting needs at least two observations")
    d = X.shape[1]

    bounds = [LOG_LS_BOUNDS] * d + [LOG_SIGNAL_BOUNDS, LOG_NOISE_BOUNDS]
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])

    def objective(z: np.ndarray) -> tuple[float, np.ndarray]:
        try:
            lml, grad = _lml_and_grad(X, y, _params_from_log(z, d))
        except ModelError:
            return 1e12, np.zeros_like(z)
        return -lml, -grad

    z0 = np.concatenate([
        np.log(init.length_scales),
        [math.log(init.signal_variance), math.log(max(init.noise_variance, 1e-8))],
    ])
    z0 = np.clip(z0, lo, hi)
    rng = np.random.default_rng(seed)
    starts = [z0] + [rng.uniform(lo, hi) for _ in range(restarts)]

    candidates = [init]
    failures = 0
    for start in starts:
        try:
            res = minimize(objective, start, jac=True, method="L-BFGS-B", bounds=bounds)
            candidates.append(_params_from_log(res.x, d))
        except (ModelError, np.linalg.LinAlgError):
            failures += 1
    if failures == len(starts):
        raise ModelError("all hyperparameter restarts failed conditioning")

    def score(p: KernelParams) -> float:
        try:
            return log_marginal_likelihood(X, y, p)
        except ModelError:
            return -np.inf

    return max(candidates, key=score)
