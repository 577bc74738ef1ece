"""Acquisition functions and their maximization over the mixed domain.

Acquisition functionals consume unit-cube coordinate batches of shape
(N, 3) (columns: relaxed segment count, horizon, optimizer budget) and
return one value per row.  Maximization enumerates the six admissible
segment counts, seeds each with scrambled-Sobol candidates over the two
continuous coordinates and refines every candidate with a vectorized
coordinate descent, so it is invariant under positive affine transforms
of the acquisition and deterministic per seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, qmc

from .config import ThetaConfig, ThetaDomain

REFINE_STEPS = (0.05, 0.02, 0.008, 0.003, 0.001)


def expected_improvement(mean, stdev, best) -> np.ndarray | float:
    """EI for maximization: (mu - f*) Phi(z) + sigma phi(z), z = (mu - f*)/sigma."""
    mean = np.asarray(mean, dtype=float)
    stdev = np.asarray(stdev, dtype=float)
    if np.any(stdev < 0):
        raise ValueError("standard deviation must be non-negative")
    imp = mean - np.asarray(best, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stdev > 0, imp / np.where(stdev > 0, stdev, 1.0), 0.0)
    ei = np.where(
        stdev > 0,
        imp * norm.cdf(z) + stdev * norm.pdf(z),
        np.maximum(imp, 0.0),
    )
    out = np.maximum(ei, 0.0)
    return float(out) if out.ndim == 0 else out


def ucb(mean, stdev, beta: float) -> np.ndarray | float:
    """Upper confidence bound mu + sqrt(beta) sigma."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    mean = np.asarray(mean, dtype=float)
    stdev = np.asarray(stdev, dtype=float)
    if np.any(stdev < 0):
        raise ValueError("standard deviation must be non-negative")
    out = mean + math.sqrt(beta) * stdev
    return float(out) if out.ndim == 0 else out


def beta_schedule(n: int, grid_size: int, delta: float = 0.1, cap: float = 9.0) -> float:
    """Bounded confidence schedule 2 log(|grid| n^2 pi^2 / (6 delta))."""
    if n < 1:
        raise ValueError("iteration index starts at 1")
    beta = 2.0 * math.log(grid_size * n**2 * math.pi**2 / (6.0 * delta))
    return min(beta, cap)


@dataclass(frozen=True)
class AcquisitionQuery:
    theta: ThetaConfig
    task: int


@dataclass(frozen=True)
class Incumbent:
    """Best-so-far values driving improvement-based acquisitions."""

    best_value: float
    per_task_best: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "per_task_best", np.asarray(self.per_task_best, dtype=float))


def _sobol_candidates(n: int, seed, m_index: int) -> np.ndarray:
    rng = np.random.default_rng([_as_int(seed), 17, m_index])
    sampler = qmc.Sobol(d=2, scramble=True, seed=rng)
    if n & (n - 1) == 0:
        return sampler.random_base2(int(math.log2(n)))
    return sampler.random(n)


def _as_int(seed) -> int:
    if isinstance(seed, (int, np.integer)):
        return int(seed)
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


def maximize_acquisition(
    f,
    seed=0,
    n_candidates: int = 1024,
    refine_steps: tuple[float, ...] = REFINE_STEPS,
) -> ThetaConfig:
    """Maximize a batch acquisition functional over the parameter domain.

    For each discrete segment count, ``n_candidates`` quasi-random points
    seed the continuous coordinates; coordinate descent with shrinking
    steps then refines all candidates in parallel.  Exact value ties are
    broken toward the lexicographically smallest coordinates.
    """
    m_units = ThetaDomain.normalize(
        np.array([[m, ThetaDomain.lower[1], ThetaDomain.lower[2]] for m in ThetaDomain.m_values])
    )[:, 0]
    blocks = []
    for i, mu in enumerate(m_units):
        cont = _sobol_candidates(n_candidates, seed, i)
        block = np.empty((n_candidates, 3))
        block[:, 0] = mu
        block[:, 1:] = cont
        blocks.append(block)
    units = np.concatenate(blocks, axis=0)
    values = np.asarray(f(units), dtype=float)

    for step in refine_steps:
        for coord in (1, 2):
            for sign in (1.0, -1.0):
                trial = units.copy()
                trial[:, coord] = np.clip(trial[:, coord] + sign * step, 0.0, 1.0)
                tv = np.asarray(f(trial), dtype=float)
                better = tv > values
                units[better] = trial[better]
                values[better] = tv[better]

    top = np.flatnonzero(values == values.max())
    if top.size > 1:
        order = np.lexsort((units[top, 2], units[top, 1], units[top, 0]))
        pick = top[order[0]]
    else:
        pick = top[0]
    return ThetaDomain.unit_to_theta(units[pick])


def select_avg_query(post, incumbent: Incumbent, seed=0, n_candidates: int = 1024) -> AcquisitionQuery:
    """Two-stage query selection for the shared-parameter strategy.

    Stage 1 maximizes expected improvement of the across-task averaged
    objective against the supplied incumbent.  Stage 2 evaluates per-task
    expected improvement at the chosen point and picks the best task,
    ties going to the lowest index.
    """

    def stage1(units: np.ndarray) -> np.ndarray:
        mean, var = post.avg_objective_batch(units)
        return expected_improvement(mean, np.sqrt(var), incumbent.best_value)

    theta = maximize_acquisition(stage1, seed=seed, n_candidates=n_candidates)

    unit = ThetaDomain.theta_to_unit(theta)
    means, cov = post.predict_all_tasks(unit)
    stdevs = np.sqrt(np.maximum(np.diag(cov), 0.0))
    eis = expected_improvement(means, stdevs, incumbent.per_task_best)
    task = int(np.argmax(eis))
    return AcquisitionQuery(theta=theta, task=task)


def select_single_task_queries(post, beta: float, seed=0, n_candidates: int = 1024) -> list[AcquisitionQuery]:
    """One GP-UCB argmax per task (independent maximizations)."""
    queries = []
    for t in range(post.n_tasks):

        def task_ucb(units: np.ndarray, _t=t) -> np.ndarray:
            mean, var = post.predict_batch(units, _t)
            return ucb(mean, np.sqrt(var), beta)

        theta = maximize_acquisition(
            task_ucb, seed=(_as_int(seed), 23, t), n_candidates=n_candidates
        )
        queries.append(AcquisitionQuery(theta=theta, task=t))
    return queries
