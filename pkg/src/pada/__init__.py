"""Policy adaptation toolkit.

Two engines share one idea, keep a model of how the new environment
deviates from the one a controller was trained in, and pick actions that
steer the new environment back onto the familiar trajectories:

* :mod:`pada.tabular` runs the loop exactly on finite MDPs so convergence
  claims can be checked in closed form.
* :mod:`pada.adapt` runs the practical loop (deviation network + one-step
  CEM planning) on perturbable continuous-control environments from
  :mod:`pada.envs`.
"""

from .core import (
    DiscreteDistribution,
    DynamicsDivergedError,
    EnumerationLimitError,
    InfiniteDivergenceError,
    RngStream,
    Trajectory,
    episodic_return,
    kl_divergence,
    rollout,
    tv_distance,
)

__all__ = [
    "DiscreteDistribution",
    "DynamicsDivergedError",
    "EnumerationLimitError",
    "InfiniteDivergenceError",
    "RngStream",
    "Trajectory",
    "episodic_return",
    "kl_divergence",
    "rollout",
    "tv_distance",
]

__version__ = "0.1.0"
