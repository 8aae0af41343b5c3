"""One-step action selection by the cross-entropy method.

Each planning call minimizes the norm of the deviation network's output
over the action box: sample a Gaussian population, clip into the box,
keep the lowest-scoring elites, refit mean and covariance, repeat.  The
planner never unrolls dynamics; the objective is a single network
evaluation per candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import RngStream

CEM_ITERATIONS = 10
CEM_POPULATION = 200
CEM_ELITES = 40
CEM_SIGMA0 = 0.5
EXPLORE_PROB = 0.01


@dataclass(frozen=True)
class ActionBox:
    """Axis-aligned action bounds."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.low, dtype=np.float64)
        hi = np.asarray(self.high, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be matching vectors")
        if np.any(lo >= hi):
            raise ValueError("action box must satisfy low < high per dimension")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    @property
    def half_range(self) -> np.ndarray:
        return 0.5 * (self.high - self.low)

    def clip(self, actions: np.ndarray) -> np.ndarray:
        return np.clip(actions, self.low, self.high)

    def sample_uniform(self, rng: RngStream) -> np.ndarray:
        return rng.gen.uniform(self.low, self.high)

    @classmethod
    def of_env(cls, env) -> "ActionBox":
        return cls(low=env.spec.action_low, high=env.spec.action_high)


@dataclass(frozen=True)
class CemConfig:
    """Planner settings.

    ``sigma0`` is the initial standard deviation as a fraction of each
    dimension's half range, so the default 0.5 means the textbook value on
    a [-1, 1] box and scales with wider actuators.
    """

    iterations: int = CEM_ITERATIONS
    population: int = CEM_POPULATION
    elites: int = CEM_ELITES
    sigma0: float = CEM_SIGMA0
    cov_regularizer: float = 1e-6
    cov_mode: str = "full"

    def __post_init__(self):
        if self.elites > self.population:
            raise ValueError("elite count cannot exceed the population")
        if self.sigma0 <= 0 or self.iterations < 1 or self.population < 1 or self.elites < 1:
            raise ValueError("planner sizes and spread must be positive")
        if self.cov_mode not in ("full", "diagonal"):
            raise ValueError(f"unknown covariance mode {self.cov_mode!r}")
        if self.cov_regularizer < 0:
            raise ValueError("covariance regularizer must be nonnegative")

    @classmethod
    def from_dict(cls, doc: dict) -> "CemConfig":
        mapping = {
            "cem_iterations": "iterations",
            "cem_population": "population",
            "cem_elites": "elites",
            "cem_sigma0": "sigma0",
            "cem_cov_mode": "cov_mode",
        }
        unknown = set(doc) - set(mapping)
        if unknown:
            raise ValueError(f"unknown planner keys: {sorted(unknown)}")
        return cls(**{mapping[k]: v for k, v in doc.items()})


def cem_minimize(objective, box: ActionBox, init_mean: np.ndarray, cfg: CemConfig, rng: RngStream) -> np.ndarray:
    """Minimize a batched objective over the box, returning the final mean.

    ``objective`` maps an (n, dim) array of candidate actions to an (n,)
    array of scores.  Selection is rank-based with ties broken by sample
    index, so any positive rescaling of the objective picks the same
    elites.
    """
    gen = rng.gen
    dim = box.dim
    mean = box.clip(np.asarray(init_mean, dtype=np.float64))
    sigma = cfg.sigma0 * box.half_range
    if cfg.cov_mode == "full" and dim > 1:
        cov = np.diag(sigma**2)
    else:
        var = sigma**2
    for _ in range(cfg.iterations):
        if cfg.cov_mode == "full" and dim > 1:
            samples = gen.multivariate_normal(mean, cov, size=cfg.population, method="cholesky")
        else:
            samples = mean + np.sqrt(var) * gen.standard_normal((cfg.population, dim))
        samples = box.clip(samples)
        scores = np.asarray(objective(samples), dtype=np.float64)
        if scores.shape != (cfg.population,):
            raise ValueError("objective must return one score per candidate")
        if not np.all(np.isfinite(scores)):
            raise ValueError("objective produced non-finite scores")
        elites = samples[np.argsort(scores, kind="stable")[: cfg.elites]]
        mean = elites.mean(axis=0)
        centered = elites - mean
        if cfg.cov_mode == "full" and dim > 1:
            cov = centered.T @ centered / cfg.elites + cfg.cov_regularizer * np.eye(dim)
        else:
            var = (centered**2).mean(axis=0) + cfg.cov_regularizer
    return box.clip(mean)


def plan_action(
    state: np.ndarray,
    deviation_model,
    source_policy,
    target_policy,
    box: ActionBox,
    cfg: CemConfig,
    rng: RngStream,
) -> np.ndarray:
    """Pick the action whose predicted deviation from the source behavior
    is smallest.

    The search warm-starts from the target policy's suggestion when one is
    available and from the source policy otherwise.
    """
    if target_policy is not None:
        init_mean = target_policy(state)
    else:
        init_mean = source_policy(state)

    def objective(actions: np.ndarray) -> np.ndarray:
        deltas = deviation_model.predict_batch(state, actions)
        return np.sum(deltas * deltas, axis=1)

    return cem_minimize(objective, box, init_mean, cfg, rng)
