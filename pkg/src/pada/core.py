"""Shared building blocks: finite distributions, distance metrics, seeded
random streams, and episode rollouts.

Everything here is a plain value type; nothing holds hidden mutable state
except the generator inside :class:`RngStream`, which is the single source
of randomness for the whole package.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-9

_U64 = (1 << 64) - 1


class InfiniteDivergenceError(ValueError):
    """KL divergence is infinite: p puts mass where q has none."""


class EnumerationLimitError(ValueError):
    """An exhaustive enumeration would exceed the configured size guard."""


class DynamicsDivergedError(RuntimeError):
    """An environment step produced a non-finite state."""


class RngStream:
    """Named deterministic random stream.

    The (seed, label) pair fully determines the draw sequence: the label is
    hashed into the counter-based generator key, so distinct consumers never
    share draws and adding a new consumer leaves every other stream's
    sequence untouched.
    """

    def __init__(self, seed: int, label: str = "root"):
        self.seed = int(seed) & _U64
        self.label = label
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        words = [int.from_bytes(digest[i : i + 8], "little") for i in (0, 8, 16, 24)]
        self._seq = np.random.SeedSequence([self.seed, *words])
        self.gen = np.random.Generator(np.random.Philox(self._seq))

    def child(self, label: str) -> "RngStream":
        """Independent stream for one consumer, addressed by purpose."""
        return RngStream(self.seed, f"{self.label}/{label}")

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label!r})"


@dataclass(frozen=True)
class DiscreteDistribution:
    """Probability vector over a finite outcome set."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError(f"probs must be a vector, got shape {p.shape}")
        if np.any(p < -PROB_TOL):
            raise ValueError("probabilities must be nonnegative")
        total = float(p.sum())
        if abs(total - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {total}, expected 1")
        p = np.clip(p, 0.0, None)
        p.flags.writeable = False
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return self.probs.shape[0]


def _as_probs(p) -> np.ndarray:
    if isinstance(p, DiscreteDistribution):
        return p.probs
    return np.asarray(p, dtype=np.float64)


def tv_distance(p, q) -> float:
    """Total variation distance (1/2) sum |p_i - q_i|."""
    pa, qa = _as_probs(p), _as_probs(q)
    if pa.shape != qa.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {qa.shape}")
    return 0.5 * float(np.abs(pa - qa).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) = sum p_i ln(p_i / q_i), natural log, with 0 ln 0 := 0.

    Raises :class:`InfiniteDivergenceError` when q has no mass somewhere
    p does; the caller decides how to handle that case.
    """
    pa, qa = _as_probs(p), _as_probs(q)
    if pa.shape != qa.shape:
        raise ValueError(f"dimension mismatch: {pa.shape} vs {qa.shape}")
    support = pa > 0.0
    if np.any(qa[support] <= 0.0):
        raise InfiniteDivergenceError("q has zero mass on the support of p")
    ps, qs = pa[support], qa[support]
    return float(np.sum(ps * (np.log(ps) - np.log(qs))))


@dataclass
class Trajectory:
    """One episode: H+1 states (the first is the initial state), H actions,
    and H rewards with ``rewards[h]`` evaluated on ``states[h + 1]`` alone.
    """

    states: list
    actions: list
    rewards: np.ndarray
    truncated: bool = False

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("need exactly one more state than actions")
        if self.rewards.shape[0] != len(self.actions):
            raise ValueError("need one reward per action")

    @property
    def horizon(self) -> int:
        return len(self.actions)


def episodic_return(traj: Trajectory) -> float:
    """Sum of the per-state rewards along the trajectory."""
    return float(traj.rewards.sum())


def rollout(env, policy, horizon: int, rng: RngStream) -> Trajectory:
    """Run ``policy`` in ``env`` for up to ``horizon`` steps.

    The env contract is ``reset(rng) -> state``, ``step(state, action, rng)
    -> (next_state, terminated)``, ``reward(state) -> float`` and
    ``contains_action(action) -> bool``.  Early termination truncates the
    trajectory and sets its flag.  Out-of-space actions are rejected before
    stepping.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    max_steps = getattr(env, "max_episode_steps", None)
    if max_steps is not None and horizon > max_steps:
        raise ValueError(f"horizon {horizon} exceeds env maximum {max_steps}")
    state = env.reset(rng)
    states = [state]
    actions: list = []
    rewards: list = []
    truncated = False
    for _ in range(horizon):
        action = policy(state)
        if not env.contains_action(action):
            raise ValueError(f"policy produced out-of-space action {action!r}")
        state, terminated = env.step(state, action, rng)
        states.append(state)
        actions.append(action)
        rewards.append(env.reward(state))
        if terminated:
            truncated = True
            break
    return Trajectory(states=states, actions=actions, rewards=np.array(rewards), truncated=truncated)
