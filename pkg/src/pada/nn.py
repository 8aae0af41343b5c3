"""Small feed-forward networks with an exact hand-written backward pass.

Rectifier hidden layers, identity output, plain SGD with a linearly
decaying rate.  Gradients are exact reverse-mode derivatives of the
mean-over-batch squared error, so finite differences can audit every
architecture in the package.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import RngStream

CHECKPOINT_MAGIC = b"PADA"
CHECKPOINT_VERSION = 1
DEFAULT_HIDDEN = (128, 128)
DEFAULT_LEARNING_RATE = 5e-3
DEFAULT_BATCH_SIZE = 64


class Mlp:
    """Fully connected network given by its layer widths.

    ``widths = [d_in, h1, ..., d_out]``; with no hidden entries the network
    is a single affine map.  Weights start uniform in +-1/sqrt(fan_in),
    biases at zero, drawn from the given stream.
    """

    def __init__(self, widths, rng: RngStream | None = None, init: bool = True):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ValueError(f"bad layer widths {widths}")
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            if init:
                if rng is None:
                    raise ValueError("initialization needs an RngStream")
                bound = 1.0 / np.sqrt(fan_in)
                w = rng.gen.uniform(-bound, bound, size=(fan_in, fan_out))
            else:
                w = np.zeros((fan_in, fan_out))
            self.weights.append(np.ascontiguousarray(w))
            self.biases.append(np.zeros(fan_out))

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def copy(self) -> "Mlp":
        clone = Mlp(self.widths, init=False)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; accepts one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.input_dim:
        raise ValueError(f"input width {h.shape[1]} does not match {net.input_dim}")
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def _forward_cached(net: Mlp, x: np.ndarray):
    activations = [x]
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            np.maximum(h, 0.0, out=h)
        activations.append(h)
    return activations


def mse_loss(net: Mlp, inputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean over the batch of the summed squared output error."""
    err = forward(net, inputs) - targets
    return float(np.mean(np.sum(err * err, axis=-1)))


def grad(net: Mlp, inputs: np.ndarray, targets: np.ndarray):
    """Exact gradients of :func:`mse_loss` for every weight and bias.

    Returns ``(grads, loss)`` where grads is a list of (dW, db) pairs in
    layer order.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if inputs.shape[0] != targets.shape[0]:
        raise ValueError("inputs and targets must have matching batch sizes")
    batch = inputs.shape[0]
    acts = _forward_cached(net, inputs)
    err = acts[-1] - targets
    loss = float(np.mean(np.sum(err * err, axis=-1)))
    delta = (2.0 / batch) * err
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(net.weights)
    for i in range(len(net.weights) - 1, -1, -1):
        grads[i] = (acts[i].T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0.0)
    return grads, loss


@dataclass(frozen=True)
class SgdSchedule:
    """Linear decay from the base rate to zero over the planned steps."""

    base_rate: float = DEFAULT_LEARNING_RATE
    total_steps: int = 1

    def rate(self, step: int) -> float:
        return self.base_rate * max(0.0, 1.0 - step / self.total_steps)


def sgd_step(net: Mlp, grads, schedule: SgdSchedule, step: int) -> Mlp:
    """One plain gradient step at the scheduled rate; updates in place."""
    lr = schedule.rate(step)
    if lr > 0.0:
        for (w, b), (dw, db) in zip(zip(net.weights, net.biases), grads):
            w -= lr * dw
            b -= lr * db
    return net


def polyak_blend(target: Mlp, source: Mlp, coefficient: float) -> Mlp:
    """target <- (1 - c) * target + c * source, parameter by parameter."""
    if target.widths != source.widths:
        raise ValueError("networks must share the architecture")
    for tw, sw in zip(target.parameters(), source.parameters()):
        tw *= 1.0 - coefficient
        tw += coefficient * sw
    return target


@dataclass(frozen=True)
class Normalizer:
    """Frozen elementwise (x - mean) / std transform."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.maximum(np.asarray(self.std, dtype=np.float64), 1e-8))

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), std=np.ones(dim))

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64)
        return cls(mean=rows.mean(axis=0), std=rows.std(axis=0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def train_regression(
    net: Mlp,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: RngStream,
    epochs: int = 3,
    batch_size: int = DEFAULT_BATCH_SIZE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
) -> Mlp:
    """Minibatch SGD over shuffled epochs with the linear-decay schedule."""
    n = inputs.shape[0]
    steps_per_epoch = max(1, n // batch_size)
    schedule = SgdSchedule(learning_rate, total_steps=epochs * steps_per_epoch)
    step = 0
    for _ in range(epochs):
        order = rng.gen.permutation(n)
        for start in range(0, steps_per_epoch * batch_size, batch_size):
            idx = order[start : start + batch_size]
            g, _ = grad(net, inputs[idx], targets[idx])
            sgd_step(net, g, schedule, step)
            step += 1
    return net


# ---------------------------------------------------------------------------
# Dynamics models over environment states


class SourceDynamicsModel:
    """Learned one-step model of the source environment.

    The network maps the normalized (state, action) pair to the state
    change, so predictions are ``state + net(x)``.
    """

    def __init__(self, net: Mlp, normalizer: Normalizer, action_scale: np.ndarray):
        self.net = net
        self.normalizer = normalizer
        self.action_scale = np.asarray(action_scale, dtype=np.float64)

    def _encode(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        return np.concatenate([self.normalizer(states), actions / self.action_scale], axis=1)

    def predict(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        x = self._encode(state, action)
        return np.asarray(state, dtype=np.float64) + forward(self.net, x)[0]

    def predict_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        x = self._encode(states, actions)
        return states + forward(self.net, x)


class ExactSourceModel:
    """Ground-truth stand-in: query the noise-free source step directly."""

    def __init__(self, env):
        self.env = env

    def predict(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        return self.env.predict_mean(state, action)

    def predict_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return np.stack([self.env.predict_mean(s, a) for s, a in zip(states, actions)])


def pretrain_source_model(
    states: np.ndarray,
    actions: np.ndarray,
    next_states: np.ndarray,
    action_scale: np.ndarray,
    rng: RngStream,
    hidden=DEFAULT_HIDDEN,
    epochs: int = 4,
    batch_size: int = DEFAULT_BATCH_SIZE,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    holdout_fraction: float = 0.1,
    min_triples: int = 10_000,
) -> tuple[SourceDynamicsModel, float]:
    """Fit the source model on collected transitions.

    Returns the model together with the held-out one-step RMSE.  The input
    normalizer is frozen from the training split and shared by downstream
    networks.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    next_states = np.asarray(next_states, dtype=np.float64)
    n = states.shape[0]
    if n < min_triples:
        raise ValueError(f"need at least {min_triples} transitions, got {n}")
    n_holdout = max(1, int(round(holdout_fraction * n)))
    order = rng.child("split").gen.permutation(n)
    train_idx, hold_idx = order[n_holdout:], order[:n_holdout]

    normalizer = Normalizer.fit(states[train_idx])
    net = Mlp([states.shape[1] + actions.shape[1], *hidden, states.shape[1]], rng.child("init"))
    model = SourceDynamicsModel(net, normalizer, action_scale)

    x_train = model._encode(states[train_idx], actions[train_idx])
    y_train = next_states[train_idx] - states[train_idx]
    train_regression(net, x_train, y_train, rng.child("sgd"), epochs=epochs, batch_size=batch_size, learning_rate=learning_rate)

    preds = model.predict_batch(states[hold_idx], actions[hold_idx])
    rmse = float(np.sqrt(np.mean(np.sum((preds - next_states[hold_idx]) ** 2, axis=1))))
    return model, rmse


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(net: Mlp, path, normalizer: Normalizer | None = None, extra: dict | None = None):
    """Write the flat binary parameter file and its JSON shape sidecar."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(net.weights)))
        for w, b in zip(net.weights, net.biases):
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    sidecar = {"widths": net.widths}
    if normalizer is not None:
        sidecar["normalizer"] = {
            "mean": [float(x) for x in normalizer.mean],
            "std": [float(x) for x in normalizer.std],
        }
    if extra:
        sidecar["extra"] = extra
    with open(path + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)


def load_checkpoint(path) -> tuple[Mlp, Normalizer | None]:
    path = str(path)
    with open(path + ".json") as fh:
        sidecar = json.load(fh)
    widths = sidecar["widths"]
    net = Mlp(widths, init=False)
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a parameter checkpoint")
        version, n_layers = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if n_layers != len(widths) - 1:
            raise ValueError("sidecar widths do not match the layer count")
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            w = np.frombuffer(fh.read(8 * fan_in * fan_out), dtype="<f8").reshape(fan_in, fan_out)
            b = np.frombuffer(fh.read(8 * fan_out), dtype="<f8")
            net.weights[i] = w.copy()
            net.biases[i] = b.copy()
    normalizer = None
    if "normalizer" in sidecar:
        normalizer = Normalizer(
            mean=np.array(sidecar["normalizer"]["mean"]),
            std=np.array(sidecar["normalizer"]["std"]),
        )
    return net, normalizer
