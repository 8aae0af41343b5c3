"""The practical adaptation loop on continuous environments.

An episode-free control loop collects target-environment transitions with
epsilon-greedy planning, aggregates them in an append-only replay buffer,
and trains a deviation network whose output, added to the source model's
prediction under the source policy, should reproduce the observed next
state.  Optional extras: distilling the planner into a standalone policy
network, and an inverse-dynamics baseline trained on the same budget for
comparison.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DynamicsDivergedError, RngStream
from .envs import Env
from .nn import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_LEARNING_RATE,
    Mlp,
    Normalizer,
    SgdSchedule,
    forward,
    grad,
    polyak_blend,
    sgd_step,
    train_regression,
)
from .planner import ActionBox, CemConfig, EXPLORE_PROB, plan_action

DEVIATION_HIDDEN = (128, 128)


class ReplayBuffer:
    """Append-only transition store with uniform sampling.

    Each record keeps the observed transition, the cached source-model
    prediction under the source policy at the stored state, and whether
    the action came from exploration.
    """

    def __init__(self, state_dim: int, action_dim: int, capacity_hint: int = 4096):
        self._n = 0
        self._states = np.empty((capacity_hint, state_dim))
        self._actions = np.empty((capacity_hint, action_dim))
        self._next_states = np.empty((capacity_hint, state_dim))
        self._source_preds = np.empty((capacity_hint, state_dim))
        self._explored = np.empty(capacity_hint, dtype=bool)

    def __len__(self) -> int:
        return self._n

    def _grow(self):
        def enlarge(arr):
            out = np.empty((arr.shape[0] * 2, *arr.shape[1:]), dtype=arr.dtype)
            out[: self._n] = arr[: self._n]
            return out

        self._states = enlarge(self._states)
        self._actions = enlarge(self._actions)
        self._next_states = enlarge(self._next_states)
        self._source_preds = enlarge(self._source_preds)
        self._explored = enlarge(self._explored)

    def append(self, state, action, next_state, source_pred, explored: bool):
        if self._n == self._states.shape[0]:
            self._grow()
        i = self._n
        self._states[i] = state
        self._actions[i] = action
        self._next_states[i] = next_state
        self._source_preds[i] = source_pred
        self._explored[i] = explored
        self._n += 1

    @property
    def states(self) -> np.ndarray:
        return self._states[: self._n]

    @property
    def actions(self) -> np.ndarray:
        return self._actions[: self._n]

    @property
    def next_states(self) -> np.ndarray:
        return self._next_states[: self._n]

    @property
    def source_preds(self) -> np.ndarray:
        return self._source_preds[: self._n]

    @property
    def explored(self) -> np.ndarray:
        return self._explored[: self._n]

    def sample_indices(self, batch_size: int, rng: RngStream) -> np.ndarray:
        if self._n == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.gen.integers(0, self._n, size=batch_size)

    def prefix_digest(self, k: int) -> str:
        """Hash of the first k records, for append-only audits."""
        k = min(k, self._n)
        h = hashlib.sha256()
        for arr in (self._states, self._actions, self._next_states, self._source_preds):
            h.update(np.ascontiguousarray(arr[:k]).tobytes())
        h.update(self._explored[:k].tobytes())
        return h.hexdigest()


class DeviationModel:
    """Network mapping (state, action) to the gap between the target's
    next state and the source model's prediction under the source policy.
    """

    def __init__(self, state_dim: int, action_dim: int, normalizer: Normalizer, action_scale: np.ndarray, rng: RngStream, hidden=DEVIATION_HIDDEN):
        self.net = Mlp([state_dim + action_dim, *hidden, state_dim], rng)
        self.normalizer = normalizer
        self.action_scale = np.asarray(action_scale, dtype=np.float64)

    def encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        return np.concatenate([self.normalizer(states), actions / self.action_scale], axis=1)

    def predict(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return forward(self.net, self.encode(state, action))[0]

    def predict_batch(self, state: np.ndarray, actions: np.ndarray) -> np.ndarray:
        actions = np.atleast_2d(actions)
        x = np.empty((actions.shape[0], self.net.input_dim))
        x[:, : state.shape[0]] = self.normalizer(state)
        x[:, state.shape[0] :] = actions / self.action_scale
        return forward(self.net, x)


def deviation_training_step(
    model: DeviationModel,
    buffer: ReplayBuffer,
    batch_size: int,
    schedule: SgdSchedule,
    step: int,
    rng: RngStream,
) -> float:
    """One SGD step of the residual regression on a uniform minibatch.

    The loss is the batch mean of the squared error between
    ``source_pred + deviation(state, action)`` and the observed next
    state, which reduces to plain regression onto the cached residuals.
    """
    idx = buffer.sample_indices(batch_size, rng)
    inputs = model.encode(buffer.states[idx], buffer.actions[idx])
    targets = buffer.next_states[idx] - buffer.source_preds[idx]
    grads, loss = grad(model.net, inputs, targets)
    sgd_step(model.net, grads, schedule, step)
    return loss


class PolicyNet:
    """Small network policy with clipped outputs."""

    def __init__(self, state_dim: int, action_dim: int, normalizer: Normalizer, box: ActionBox, rng: RngStream, hidden=DEVIATION_HIDDEN):
        self.net = Mlp([state_dim, *hidden, action_dim], rng)
        self.normalizer = normalizer
        self.box = box

    def __call__(self, state: np.ndarray) -> np.ndarray:
        return self.box.clip(forward(self.net, self.normalizer(state)))

    def copy(self) -> "PolicyNet":
        clone = PolicyNet.__new__(PolicyNet)
        clone.net = self.net.copy()
        clone.normalizer = self.normalizer
        clone.box = self.box
        return clone


@dataclass
class AdaptRunConfig:
    """Loop sizes and cadences for one adaptation run."""

    total_steps: int = 50_000
    steps_per_iteration: int = 200
    explore_prob: float = EXPLORE_PROB
    sgd_steps_per_iteration: int | None = None  # None: one per new transition
    batch_size: int = DEFAULT_BATCH_SIZE
    learning_rate: float = DEFAULT_LEARNING_RATE
    distill: bool = False
    distill_period: int = 3000
    distill_window: int = 10_000
    distill_polyak: float = 0.05
    distill_sgd_steps: int = 1500
    eval_interval: int = 1000
    eval_episodes: int = 5
    record_wall_time: bool = False

    def __post_init__(self):
        if not 0.0 <= self.explore_prob <= 1.0:
            raise ValueError("explore probability must lie in [0, 1]")
        if self.total_steps < self.steps_per_iteration:
            raise ValueError("budget must cover at least one iteration")

    @classmethod
    def from_dict(cls, doc: dict) -> "AdaptRunConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(doc) - allowed
        if unknown:
            raise ValueError(f"unknown adaptation keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class CurvePoint:
    env_steps: int
    episodic_return_mean: float
    episodic_return_std: float
    deviation_mean: float
    explored_fraction: float
    buffer_size: int
    wall_time_s: float


@dataclass
class AdaptRunResult:
    algorithm: str
    curve: list
    buffer: ReplayBuffer
    deviation_model: DeviationModel | None
    target_policy: PolicyNet | None
    final_policy: object

    @property
    def final_return(self) -> float:
        return self.curve[-1].episodic_return_mean

    @property
    def final_deviation(self) -> float:
        return self.curve[-1].deviation_mean


def _state_normalizer(source_env: Env, source_policy, rng: RngStream, n_steps: int = 2000) -> Normalizer:
    """Frozen state statistics from a seeded source-environment rollout set."""
    stream = rng.child("normalizer")
    states = []
    state = source_env.reset(stream)
    episode_steps = 0
    for _ in range(n_steps):
        states.append(state)
        action = np.asarray(source_policy(state), dtype=np.float64)
        jitter = 0.1 * source_env.spec.action_scale * stream.gen.standard_normal(action.shape)
        action = np.clip(action + jitter, source_env.spec.action_low, source_env.spec.action_high)
        state, terminated = source_env.step(state, action, stream)
        episode_steps += 1
        if terminated or episode_steps >= source_env.max_episode_steps:
            state = source_env.reset(stream)
            episode_steps = 0
    return Normalizer.fit(np.asarray(states))


def evaluate_policy(env: Env, policy, episodes: int, rng: RngStream, source_policy, source_model) -> tuple[float, float, float]:
    """Run evaluation episodes; returns (mean return, std, mean deviation).

    The deviation of a step is the distance between the observed next
    state and the source model's prediction under the source policy.
    """
    returns = np.empty(episodes)
    deviations = []
    for ep in range(episodes):
        stream = rng.child(f"episode-{ep}")
        state = env.reset(stream)
        total = 0.0
        for _ in range(env.max_episode_steps):
            action = policy(state)
            source_pred = source_model.predict(state, source_policy(state))
            try:
                nxt, terminated = env.step(state, action, stream)
            except DynamicsDivergedError:
                break
            total += env.reward(nxt)
            deviations.append(float(np.linalg.norm(nxt - source_pred)))
            state = nxt
            if terminated:
                break
        returns[ep] = total
    dev = float(np.mean(deviations)) if deviations else float("nan")
    return float(returns.mean()), float(returns.std()), dev


def _run_control_loop(
    algorithm: str,
    pair: tuple[Env, Env],
    source_policy,
    source_model,
    cfg: AdaptRunConfig,
    cem: CemConfig,
    rng: RngStream,
    act,
    train,
    eval_policy_provider,
) -> AdaptRunResult:
    """Shared collect/train/evaluate skeleton for all algorithms.

    ``act(state, explore_stream, plan_stream) -> (action, explored)``
    produces behavior actions, ``train(new_count)`` runs the learning
    phase after each block, and ``eval_policy_provider()`` returns the
    greedy policy to evaluate.
    """
    source_env, target_env = pair
    explore_stream = rng.child("explore")
    plan_stream = rng.child("plan")
    env_stream = rng.child("env")
    eval_stream = rng.child("eval")

    buffer = ReplayBuffer(source_env.spec.state_dim, source_env.spec.action_dim)
    curve: list[CurvePoint] = []
    t_start = time.perf_counter()
    explored_since_log = 0
    steps_since_log = 0

    def log_point(env_steps: int):
        mean, std, dev = evaluate_policy(
            target_env,
            eval_policy_provider(),
            cfg.eval_episodes,
            eval_stream.child(f"at-{env_steps}"),
            source_policy,
            source_model,
        )
        wall = time.perf_counter() - t_start if cfg.record_wall_time else 0.0
        frac = explored_since_log / steps_since_log if steps_since_log else 0.0
        curve.append(CurvePoint(env_steps, mean, std, dev, frac, len(buffer), wall))

    state = target_env.reset(env_stream)
    episode_steps = 0
    steps = 0
    next_eval = cfg.eval_interval
    log_point(0)
    while steps < cfg.total_steps:
        block = min(cfg.steps_per_iteration, cfg.total_steps - steps)
        collected = 0
        while collected < block:
            action, explored = act(state, explore_stream, plan_stream)
            source_pred = source_model.predict(state, source_policy(state))
            try:
                nxt, terminated = target_env.step(state, action, env_stream)
            except DynamicsDivergedError:
                state = target_env.reset(env_stream)
                episode_steps = 0
                continue
            buffer.append(state, action, nxt, source_pred, explored)
            steps += 1
            collected += 1
            episode_steps += 1
            steps_since_log += 1
            explored_since_log += int(explored)
            state = nxt
            if terminated or episode_steps >= target_env.max_episode_steps:
                state = target_env.reset(env_stream)
                episode_steps = 0
        train(collected, buffer)
        if steps >= next_eval or steps >= cfg.total_steps:
            log_point(steps)
            explored_since_log = 0
            steps_since_log = 0
            while next_eval <= steps:
                next_eval += cfg.eval_interval
    return AdaptRunResult(
        algorithm=algorithm,
        curve=curve,
        buffer=buffer,
        deviation_model=None,
        target_policy=None,
        final_policy=eval_policy_provider(),
    )


def pada_dm_run(
    pair: tuple[Env, Env],
    source_policy,
    source_model,
    cfg: AdaptRunConfig,
    cem: CemConfig,
    rng: RngStream,
) -> AdaptRunResult:
    """Deviation-model adaptation with one-step CEM planning.

    Follows the epsilon-greedy collect loop, aggregates every transition,
    and regresses the deviation network onto buffer residuals after each
    block of steps.  With ``cfg.distill`` on, a policy network is fitted
    to the planner's actions over a recent window and softly blended into
    the running target policy every ``distill_period`` environment steps;
    once it exists it also warm-starts the planner and handles greedy
    evaluation.
    """
    source_env, target_env = pair
    spec = source_env.spec
    box = ActionBox.of_env(target_env)
    normalizer = _state_normalizer(source_env, source_policy, rng)
    model = DeviationModel(spec.state_dim, spec.action_dim, normalizer, spec.action_scale, rng.child("deviation-init"))
    schedule = SgdSchedule(cfg.learning_rate, total_steps=cfg.total_steps)
    minibatch_stream = rng.child("minibatch")
    distill_stream = rng.child("distill")

    target_policy_box = {"net": None, "online": None, "since": 0, "sgd_step": 0}

    def cem_policy(state):
        return plan_action(state, model, source_policy, target_policy_box["net"], box, cem, rng.child("eval-plan"))

    def act(state, explore_stream, plan_stream):
        if explore_stream.gen.random() < cfg.explore_prob:
            return box.sample_uniform(explore_stream), True
        return (
            plan_action(state, model, source_policy, target_policy_box["net"], box, cem, plan_stream),
            False,
        )

    def train(new_count, buffer):
        n_updates = cfg.sgd_steps_per_iteration if cfg.sgd_steps_per_iteration is not None else new_count
        for _ in range(n_updates):
            deviation_training_step(model, buffer, cfg.batch_size, schedule, target_policy_box["sgd_step"], minibatch_stream)
            target_policy_box["sgd_step"] += 1
        if cfg.distill:
            target_policy_box["since"] += new_count
            if target_policy_box["since"] >= cfg.distill_period:
                target_policy_box["since"] -= cfg.distill_period
                fitted = distill_target_policy(
                    buffer,
                    target_policy_box["online"],
                    normalizer,
                    box,
                    distill_stream,
                    window=cfg.distill_window,
                    sgd_steps=cfg.distill_sgd_steps,
                    batch_size=cfg.batch_size,
                    learning_rate=cfg.learning_rate,
                )
                if fitted is not None:
                    target_policy_box["online"] = fitted
                    if target_policy_box["net"] is None:
                        target_policy_box["net"] = fitted.copy()
                    else:
                        polyak_blend(target_policy_box["net"].net, fitted.net, cfg.distill_polyak)

    def eval_policy_provider():
        if cfg.distill and target_policy_box["net"] is not None:
            return target_policy_box["net"]
        return cem_policy

    result = _run_control_loop(
        "pada_dm_distill" if cfg.distill else "pada_dm",
        pair,
        source_policy,
        source_model,
        cfg,
        cem,
        rng,
        act,
        train,
        eval_policy_provider,
    )
    result.deviation_model = model
    result.target_policy = target_policy_box["net"]
    return result


def distill_target_policy(
    buffer: ReplayBuffer,
    current: PolicyNet | None,
    normalizer: Normalizer,
    box: ActionBox,
    rng: RngStream,
    window: int = 10_000,
    sgd_steps: int = 1500,
    batch_size: int = DEFAULT_BATCH_SIZE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
) -> PolicyNet | None:
    """Fit a policy network to the planner's recent actions.

    Exploration transitions are excluded; with no planner-labeled data the
    call is a no-op returning None.  The fit warm-starts from ``current``
    when given so successive fits evolve continuously.
    """
    planner_idx = np.flatnonzero(~buffer.explored)
    if planner_idx.size == 0:
        return None
    planner_idx = planner_idx[-window:]
    states = buffer.states[planner_idx]
    actions = buffer.actions[planner_idx]
    if current is None:
        policy = PolicyNet(states.shape[1], actions.shape[1], normalizer, box, rng.child("init"))
    else:
        policy = current.copy()
    inputs = normalizer(states)
    n = inputs.shape[0]
    schedule = SgdSchedule(learning_rate, total_steps=sgd_steps)
    stream = rng.child("sgd")
    for step in range(sgd_steps):
        idx = stream.gen.integers(0, n, size=min(batch_size, n))
        grads, _ = grad(policy.net, inputs[idx], actions[idx])
        sgd_step(policy.net, grads, schedule, step)
    return policy


def source_only_run(
    pair: tuple[Env, Env],
    source_policy,
    source_model,
    cfg: AdaptRunConfig,
    cem: CemConfig,
    rng: RngStream,
) -> AdaptRunResult:
    """Baseline: execute the unadapted source policy in the target env."""

    def act(state, explore_stream, plan_stream):
        return np.asarray(source_policy(state), dtype=np.float64), False

    def train(new_count, buffer):
        pass

    return _run_control_loop(
        "source_only", pair, source_policy, source_model, cfg, cem, rng, act, train, lambda: source_policy
    )


class InverseDynamicsModel:
    """Network mapping (state, desired next state) to an action."""

    def __init__(self, state_dim: int, action_dim: int, normalizer: Normalizer, box: ActionBox, rng: RngStream, hidden=DEVIATION_HIDDEN):
        self.net = Mlp([2 * state_dim, *hidden, action_dim], rng)
        self.normalizer = normalizer
        self.box = box

    def encode(self, states: np.ndarray, next_states: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        next_states = np.atleast_2d(next_states)
        return np.concatenate([self.normalizer(states), self.normalizer(next_states)], axis=1)

    def act(self, state: np.ndarray, desired_next: np.ndarray) -> np.ndarray:
        return self.box.clip(forward(self.net, self.encode(state, desired_next))[0])


def idm_baseline_run(
    pair: tuple[Env, Env],
    source_policy,
    source_model,
    cfg: AdaptRunConfig,
    cem: CemConfig,
    rng: RngStream,
) -> AdaptRunResult:
    """Inverse-dynamics baseline on the same budget and metrics.

    The model phi(state, next state) -> action is regressed on the
    collected target transitions; the policy queries phi at the source
    model's predicted next state under the source policy.
    """
    source_env, target_env = pair
    spec = source_env.spec
    box = ActionBox.of_env(target_env)
    normalizer = _state_normalizer(source_env, source_policy, rng)
    idm = InverseDynamicsModel(spec.state_dim, spec.action_dim, normalizer, box, rng.child("idm-init"))
    schedule = SgdSchedule(cfg.learning_rate, total_steps=cfg.total_steps)
    minibatch_stream = rng.child("minibatch")
    counter = {"sgd_step": 0}

    def idm_policy(state):
        desired = source_model.predict(state, source_policy(state))
        return idm.act(state, desired)

    def act(state, explore_stream, plan_stream):
        if explore_stream.gen.random() < cfg.explore_prob:
            return box.sample_uniform(explore_stream), True
        return idm_policy(state), False

    def train(new_count, buffer):
        n_updates = cfg.sgd_steps_per_iteration if cfg.sgd_steps_per_iteration is not None else new_count
        for _ in range(n_updates):
            idx = buffer.sample_indices(cfg.batch_size, minibatch_stream)
            inputs = idm.encode(buffer.states[idx], buffer.next_states[idx])
            grads, _ = grad(idm.net, inputs, buffer.actions[idx])
            sgd_step(idm.net, grads, schedule, counter["sgd_step"])
            counter["sgd_step"] += 1

    result = _run_control_loop(
        "idm_baseline", pair, source_policy, source_model, cfg, cem, rng, act, train, lambda: idm_policy
    )
    return result


def deviation_accuracy_report(
    model: DeviationModel,
    pair: tuple[Env, Env],
    policy,
    n_trajectories: int,
    rng: RngStream,
    source_policy=None,
    source_model=None,
) -> dict:
    """Predicted versus realized per-step deviation magnitudes.

    Rolls the policy in the target environment and records, per step, the
    norm of the deviation network's output next to the norm of the actual
    gap between the observed next state and the source model's prediction.
    Returns the per-step series, per-trajectory means, and the
    least-squares slope (through the origin) of predicted against actual.
    """
    source_env, target_env = pair
    predicted_steps: list[float] = []
    actual_steps: list[float] = []
    traj_means = np.empty((n_trajectories, 2))
    for t in range(n_trajectories):
        stream = rng.child(f"trajectory-{t}")
        state = target_env.reset(stream)
        preds, actuals = [], []
        for _ in range(target_env.max_episode_steps):
            action = policy(state)
            preds.append(float(np.linalg.norm(model.predict(state, action))))
            source_pred = source_model.predict(state, source_policy(state))
            nxt, terminated = target_env.step(state, action, stream)
            actuals.append(float(np.linalg.norm(nxt - source_pred)))
            state = nxt
            if terminated:
                break
        predicted_steps.extend(preds)
        actual_steps.extend(actuals)
        traj_means[t] = (np.mean(preds), np.mean(actuals))
    actual = np.asarray(actual_steps)
    predicted = np.asarray(predicted_steps)
    denom = float(actual @ actual)
    slope = float(predicted @ actual / denom) if denom > 0 else float("nan")
    return {
        "predicted": predicted,
        "actual": actual,
        "trajectory_means": traj_means,
        "slope": slope,
    }
