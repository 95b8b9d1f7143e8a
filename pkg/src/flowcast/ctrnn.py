"""Continuous-time recurrent predictor trained online.

The hidden units follow tau_i * dy_i/dt = -y_i + tanh(net_i), integrated with
forward Euler on a mesh of step dt (one step per arriving bar). A linear
readout emits the next k per-bar log-returns. Gradients run through a
truncated unroll of the last h steps and are applied one sample at a time
with per-weight RMS-normalized learning rates. A single-hidden-layer
feedforward network is included as the offline comparison arm.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, WarmupError

CHECKPOINT_FORMAT = "flowcast-weights"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Topology:
    """Network shape and integration mesh.

    dt and tau share units of one bar interval; dt <= min(tau) keeps the Euler
    step a convex combination, which bounds hidden activations in [-1, 1].
    n_out equals the prediction horizon k.
    """

    n_in: int
    n_hidden: int
    n_out: int
    dt: float = 0.5
    tau: float | tuple[float, ...] = 1.0

    def __post_init__(self):
        if min(self.n_in, self.n_hidden, self.n_out) < 1:
            raise ConfigError("all unit counts must be >= 1")
        tau = self.tau_vector
        if len(tau) != self.n_hidden:
            raise ConfigError("tau must be scalar or one value per hidden unit")
        if not (0.0 < self.dt <= float(tau.min())):
            raise ConfigError("require 0 < dt <= min(tau) for a stable Euler step")

    @property
    def tau_vector(self) -> np.ndarray:
        if np.isscalar(self.tau):
            return np.full(self.n_hidden, float(self.tau))
        return np.asarray(self.tau, dtype=np.float64)

    @property
    def alpha(self) -> np.ndarray:
        """Per-unit Euler gain dt/tau."""
        return self.dt / self.tau_vector


@dataclass
class Weights:
    """All trainable parameters. Treat instances as immutable snapshots."""

    w_in: np.ndarray      # n_hidden x n_in
    w_rec: np.ndarray     # n_hidden x n_hidden
    w_out: np.ndarray     # n_out x n_hidden
    b_hidden: np.ndarray  # n_hidden
    b_out: np.ndarray     # n_out

    FIELDS = ("w_in", "w_rec", "w_out", "b_hidden", "b_out")

    def copy(self) -> "Weights":
        return Weights(*(getattr(self, f).copy() for f in self.FIELDS))

    def check_finite(self) -> None:
        for f in self.FIELDS:
            if not np.all(np.isfinite(getattr(self, f))):
                raise NumericalError(f"non-finite entries in {f}")

    @classmethod
    def zeros(cls, topo: Topology) -> "Weights":
        return cls(
            np.zeros((topo.n_hidden, topo.n_in)),
            np.zeros((topo.n_hidden, topo.n_hidden)),
            np.zeros((topo.n_out, topo.n_hidden)),
            np.zeros(topo.n_hidden),
            np.zeros(topo.n_out),
        )

    def allclose(self, other: "Weights", atol: float = 0.0) -> bool:
        return all(np.allclose(getattr(self, f), getattr(other, f), atol=atol) for f in self.FIELDS)

    def equal(self, other: "Weights") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)


@dataclass(frozen=True)
class NetworkState:
    """Hidden activation vector; stays inside [-1, 1]^n under the dynamics."""

    y: np.ndarray

    @classmethod
    def initial(cls, topo: Topology) -> "NetworkState":
        return cls(np.zeros(topo.n_hidden))


@dataclass(frozen=True)
class Prediction:
    """k-step-ahead predicted per-bar log-returns from one origin bar."""

    horizon: int
    values: np.ndarray
    origin_timestamp: int = 0

    def __post_init__(self):
        if len(self.values) != self.horizon:
            raise ConfigError("prediction length must equal horizon")


@dataclass(frozen=True)
class TrainConfig:
    truncation_depth: int = 20
    base_rate: float = 0.005
    adapt_decay: float = 0.99
    seed: int = 0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.truncation_depth < 1:
            raise ConfigError("truncation_depth must be >= 1")
        if self.base_rate <= 0:
            raise ConfigError("base_rate must be > 0")
        if not (0.0 < self.adapt_decay < 1.0):
            raise ConfigError("adapt_decay must lie in (0, 1)")


@dataclass
class RunningError:
    """Squared error summed continually over the run, never reset per epoch."""

    summed_sq_error: float = 0.0
    n_terms: int = 0

    def add(self, value: float) -> None:
        if value < 0:
            raise NumericalError("squared error cannot be negative")
        self.summed_sq_error += value
        self.n_terms += 1


def init_weights(topology: Topology, seed: int) -> Weights:
    """Uniform [-s, s] entries with s = 1/sqrt(fan-in) per matrix; zero biases."""
    rng = np.random.default_rng(seed)

    def draw(rows, cols, fan_in):
        s = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-s, s, size=(rows, cols))

    return Weights(
        draw(topology.n_hidden, topology.n_in, topology.n_in),
        draw(topology.n_hidden, topology.n_hidden, topology.n_hidden),
        draw(topology.n_out, topology.n_hidden, topology.n_hidden),
        np.zeros(topology.n_hidden),
        np.zeros(topology.n_out),
    )


def step(state: NetworkState, w: Weights, x: np.ndarray, topo: Topology) -> NetworkState:
    """One forward-Euler step of the coupled unit dynamics."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (topo.n_in,):
        raise ValueError(f"input shape {x.shape} != ({topo.n_in},)")
    if state.y.shape != (topo.n_hidden,):
        raise ValueError(f"state shape {state.y.shape} != ({topo.n_hidden},)")
    net = w.w_rec @ state.y + w.w_in @ x + w.b_hidden
    alpha = topo.alpha
    return NetworkState(state.y + alpha * (-state.y + np.tanh(net)))


def predict(state: NetworkState, w: Weights, topo: Topology, origin_timestamp: int = 0) -> Prediction:
    """Linear readout of the hidden state; component j is the predicted
    log-return j+1 bars ahead of the origin bar."""
    values = w.w_out @ state.y + w.b_out
    return Prediction(topo.n_out, values, origin_timestamp)


def loss(pred, target) -> float:
    """Mean squared error over the k predicted components."""
    values = pred.values if isinstance(pred, Prediction) else np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if values.shape != target.shape:
        raise ValueError(f"prediction shape {values.shape} != target shape {target.shape}")
    diff = values - target
    return float(diff @ diff) / len(diff)


def _unroll(w: Weights, y0: np.ndarray, inputs: list[np.ndarray], topo: Topology):
    """Forward pass of the truncated window; returns per-step pre-states and tanh values."""
    alpha = topo.alpha
    ys = [y0]
    tanhs = []
    y = y0
    for x in inputs:
        t = np.tanh(w.w_rec @ y + w.w_in @ x + w.b_hidden)
        tanhs.append(t)
        y = y + alpha * (t - y)
        ys.append(y)
    return ys, tanhs


def bptt_gradient(w: Weights, states, inputs, targets, topo: Topology, depth: int | None = None) -> Weights:
    """Exact gradient of the readout loss through the unrolled h-step dynamics.

    ``states`` are the pre-step hidden vectors for the window, oldest first;
    only the oldest anchors the unroll (gradient is truncated below it) and the
    forward pass is recomputed under ``w`` so the result matches finite
    differences of the unrolled loss exactly.
    """
    states = list(states)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    h = depth if depth is not None else len(inputs)
    if len(inputs) < h or len(states) < h:
        raise WarmupError(f"need {h} states and inputs, have {len(states)} and {len(inputs)}")
    if len(inputs) > h:
        inputs = inputs[-h:]
        states = states[-h:]
    y0 = states[0].y if isinstance(states[0], NetworkState) else np.asarray(states[0], dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)

    ys, tanhs = _unroll(w, y0, inputs, topo)
    residual = (w.w_out @ ys[-1] + w.b_out) - targets
    dz = (2.0 / len(residual)) * residual

    g = Weights.zeros(topo)
    g.w_out = np.outer(dz, ys[-1])
    g.b_out = dz.copy()

    alpha = topo.alpha
    delta = w.w_out.T @ dz
    for s in range(h - 1, -1, -1):
        gamma = alpha * (1.0 - tanhs[s] ** 2) * delta
        g.w_rec += np.outer(gamma, ys[s])
        g.w_in += np.outer(gamma, inputs[s])
        g.b_hidden += gamma
        delta = (1.0 - alpha) * delta + w.w_rec.T @ gamma
    return g


def online_update(w: Weights, g: Weights, stats: Weights, cfg: TrainConfig) -> tuple[Weights, Weights]:
    """One stochastic step with per-weight RMS-normalized learning rate.

    stats <- decay*stats + (1-decay)*g^2, w <- w - base_rate * g / (sqrt(stats) + eps).
    Returns fresh (weights, stats); inputs are not mutated.
    """
    new_w = w.copy()
    new_stats = stats.copy()
    for f in Weights.FIELDS:
        gf = getattr(g, f)
        sf = cfg.adapt_decay * getattr(stats, f) + (1.0 - cfg.adapt_decay) * gf * gf
        setattr(new_stats, f, sf)
        denom = np.sqrt(sf) + cfg.epsilon
        delta = np.zeros_like(gf)
        nz = denom > 0.0  # zero gradient with zero stats and epsilon steps nowhere
        np.divide(cfg.base_rate * gf, denom, out=delta, where=nz)
        setattr(new_w, f, getattr(w, f) - delta)
    return new_w, new_stats


@dataclass
class TrainResult:
    weights: Weights
    error: RunningError
    error_trace: np.ndarray  # summed_sq_error after each update
    state: NetworkState
    bars_seen: int
    updates: int


class OnlineTrainer:
    """Continuous per-bar loop: step dynamics, predict, and once a prediction's
    targets have matured, backprop through the truncated window and update.

    ``observe`` returns a Prediction for every bar, so the caller decides what
    counts as warm-up; weight updates begin only after truncation_depth bars of
    history and horizon bars of maturity exist.
    """

    def __init__(self, topo: Topology, cfg: TrainConfig):
        self.topo = topo
        self.cfg = cfg
        self.weights = init_weights(topo, cfg.seed)
        self.stats = Weights.zeros(topo)
        self.state = NetworkState.initial(topo)
        self.error = RunningError()
        self.error_trace: list[float] = []
        self._bar = -1
        self._returns: list[float] = []
        # rolling (pre-state, input) history for gradient windows
        self._hist: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=cfg.truncation_depth + topo.n_out + 1)
        self._hist_start = 0  # bar index of _hist[0]
        self._pending: deque[tuple[int, np.ndarray]] = deque()  # (origin bar, predicted values)

    @property
    def bars_seen(self) -> int:
        return self._bar + 1

    @property
    def updates(self) -> int:
        return len(self.error_trace)

    def observe(self, x: np.ndarray, realized_return: float, timestamp: int = 0) -> Prediction:
        """Feed the bar's feature vector and its realized log-return; returns
        the prediction originating at this bar."""
        self._bar += 1
        t = self._bar
        self._returns.append(float(realized_return))

        self._mature(t)

        x = np.asarray(x, dtype=np.float64).copy()
        pre_state = self.state.y
        if len(self._hist) == self._hist.maxlen:
            self._hist_start += 1
        self._hist.append((pre_state, x))
        self.state = step(self.state, self.weights, x, self.topo)
        pred = predict(self.state, self.weights, self.topo, origin_timestamp=timestamp)
        if not np.all(np.isfinite(pred.values)):
            raise NumericalError(f"non-finite prediction at bar {t}")

        h = self.cfg.truncation_depth
        if t - self._hist_start + 1 >= h:  # full gradient window available
            self._pending.append((t, pred.values))
        return pred

    def _mature(self, now: int) -> None:
        k = self.topo.n_out
        h = self.cfg.truncation_depth
        while self._pending and self._pending[0][0] + k <= now:
            origin, values = self._pending.popleft()
            targets = np.array(self._returns[origin + 1 : origin + k + 1])
            self.error.add(loss(values, targets))
            lo = origin - h + 1 - self._hist_start
            assert lo >= 0, "gradient window fell out of the history buffer"
            window = list(self._hist)[lo : lo + h]
            states = [NetworkState(s) for s, _ in window]
            inputs = [x for _, x in window]
            g = bptt_gradient(self.weights, states, inputs, targets, self.topo, depth=h)
            self.weights, self.stats = online_update(self.weights, g, self.stats, self.cfg)
            self.error_trace.append(self.error.summed_sq_error)

    def result(self) -> TrainResult:
        return TrainResult(
            weights=self.weights,
            error=self.error,
            error_trace=np.array(self.error_trace),
            state=self.state,
            bars_seen=self.bars_seen,
            updates=self.updates,
        )


def train_online(stream, topo: Topology, cfg: TrainConfig, on_prediction=None) -> TrainResult:
    """Drive an OnlineTrainer over a finite stream of (features, realized return).

    Deterministic given (seed, stream, config); an exhausted stream ends the
    run cleanly with whatever has been learned so far. ``on_prediction`` is
    called with each per-bar Prediction as it is emitted.
    """
    trainer = OnlineTrainer(topo, cfg)
    for x, r in stream:
        pred = trainer.observe(x, r)
        if on_prediction is not None:
            on_prediction(pred)
    return trainer.result()


# ---------------------------------------------------------------------------
# offline feedforward comparison arm


@dataclass(frozen=True)
class BaselineConfig:
    n_hidden: int = 16
    learning_rate: float = 0.05
    epochs: int = 200
    seed: int = 0


class FeedforwardBaseline:
    """Single-hidden-layer tanh network trained with full-batch gradient descent.

    Shares the k-vector predict contract with the recurrent model so the two
    can be compared on identical feature windows.
    """

    def __init__(self, n_in: int, n_hidden: int, n_out: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        s1 = 1.0 / math.sqrt(n_in)
        s2 = 1.0 / math.sqrt(n_hidden)
        self.w1 = rng.uniform(-s1, s1, size=(n_hidden, n_in))
        self.b1 = np.zeros(n_hidden)
        self.w2 = rng.uniform(-s2, s2, size=(n_out, n_hidden))
        self.b2 = np.zeros(n_out)

    def predict(self, x: np.ndarray) -> np.ndarray:
        hidden = np.tanh(self.w1 @ x + self.b1)
        return self.w2 @ hidden + self.b2

    def batch_loss(self, X: np.ndarray, Y: np.ndarray) -> float:
        hidden = np.tanh(X @ self.w1.T + self.b1)
        out = hidden @ self.w2.T + self.b2
        return float(np.mean((out - Y) ** 2))

    def gradients(self, X: np.ndarray, Y: np.ndarray):
        """Mean-squared-error gradients over the batch, in parameter order
        (w1, b1, w2, b2)."""
        n, k = Y.shape
        hidden = np.tanh(X @ self.w1.T + self.b1)
        out = hidden @ self.w2.T + self.b2
        dout = (2.0 / (n * k)) * (out - Y)
        g_w2 = dout.T @ hidden
        g_b2 = dout.sum(axis=0)
        dhidden = (dout @ self.w2) * (1.0 - hidden**2)
        g_w1 = dhidden.T @ X
        g_b1 = dhidden.sum(axis=0)
        return g_w1, g_b1, g_w2, g_b2

    def fit(self, X: np.ndarray, Y: np.ndarray, learning_rate: float, epochs: int) -> list[float]:
        history = []
        for _ in range(epochs):
            g_w1, g_b1, g_w2, g_b2 = self.gradients(X, Y)
            self.w1 -= learning_rate * g_w1
            self.b1 -= learning_rate * g_b1
            self.w2 -= learning_rate * g_w2
            self.b2 -= learning_rate * g_b2
            history.append(self.batch_loss(X, Y))
        return history


def feedforward_baseline(features: np.ndarray, targets: np.ndarray, cfg: BaselineConfig) -> FeedforwardBaseline:
    """Train the offline comparison network on fixed feature windows."""
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or len(X) != len(Y):
        raise ConfigError("features and targets must be aligned 2-d arrays")
    model = FeedforwardBaseline(X.shape[1], cfg.n_hidden, Y.shape[1], cfg.seed)
    model.fit(X, Y, cfg.learning_rate, cfg.epochs)
    return model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(w: Weights, topo: Topology, seed: int, updates: int) -> str:
    """Serialize weights to a versioned JSON document that round-trips bit-exactly."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "topology": {
            "n_in": topo.n_in,
            "n_hidden": topo.n_hidden,
            "n_out": topo.n_out,
            "dt": topo.dt,
            "tau": topo.tau_vector.tolist(),
        },
        "seed": seed,
        "updates": updates,
        "weights": {f: getattr(w, f).tolist() for f in Weights.FIELDS},
    }
    return json.dumps(doc, indent=1)


def load_checkpoint(text: str) -> tuple[Weights, Topology, int, int]:
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError("not a weights checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('version')}")
    t = doc["topology"]
    topo = Topology(t["n_in"], t["n_hidden"], t["n_out"], t["dt"], tuple(t["tau"]))
    wd = doc["weights"]
    w = Weights(*(np.array(wd[f], dtype=np.float64) for f in Weights.FIELDS))
    w.check_finite()
    return w, topo, int(doc["seed"]), int(doc["updates"])
