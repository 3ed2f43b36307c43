"""A small dense neural-network engine in numpy.

Everything runs in float64. Networks are plain containers of weight and bias
arrays; :func:`forward`, :func:`backward` and :func:`grad_l2` are pure
functions of those arrays, and :func:`fit` is a generic minibatch Adam loop
with early stopping that the moment heads and the flows share.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ._binio import expect_count, read_block, write_block
from .errors import ConfigError, FormatError, TrainingError

ACTIVATIONS = ("tanh", "relu", "linear")
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(eq=False)
class MlpNetwork:
    """Dense feed-forward network.

    ``weights[k]`` has shape ``(layer_sizes[k], layer_sizes[k+1])`` and is
    followed by ``activations[k]``. The last activation is always linear.
    """

    layer_sizes: tuple
    activations: tuple
    weights: list
    biases: list
    seed: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        self.activations = tuple(self.activations)
        n = len(self.layer_sizes) - 1
        if n < 1 or min(self.layer_sizes) < 1:
            raise ConfigError(f"invalid layer sizes {self.layer_sizes}")
        if len(self.activations) != n:
            raise ConfigError(f"need {n} activations, got {len(self.activations)}")
        bad = [a for a in self.activations if a not in ACTIVATIONS]
        if bad:
            raise ConfigError(f"unknown activation(s) {bad}")
        if self.activations[-1] != "linear":
            raise ConfigError("final activation must be linear")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != self.layer_sizes[k:k + 2] or b.shape != (self.layer_sizes[k + 1],):
                raise ConfigError(f"layer {k} parameter shapes {w.shape}, {b.shape} disagree with layer sizes")

    @classmethod
    def create(cls, layer_sizes, hidden_activation="tanh", seed=0, zero_output=False):
        """Glorot-uniform weights and zero biases drawn from ``seed``.

        ``zero_output`` zeroes the last layer so the network initially outputs 0.
        """
        sizes = tuple(int(s) for s in layer_sizes)
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        if zero_output:
            weights[-1][:] = 0.0
        acts = (hidden_activation,) * (len(sizes) - 2) + ("linear",)
        return cls(sizes, acts, weights, biases, seed)

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def params(self):
        """Parameter arrays in the order ``[W0, b0, W1, b1, ...]`` (not copies)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params, copy=True):
        params = list(params)
        if not copy:
            # unchecked view for inner training loops
            net = object.__new__(MlpNetwork)
            net.layer_sizes, net.activations, net.seed = self.layer_sizes, self.activations, self.seed
            net.weights, net.biases = params[0::2], params[1::2]
            return net
        return MlpNetwork(self.layer_sizes, self.activations,
                          [p.copy() for p in params[0::2]], [p.copy() for p in params[1::2]], self.seed)

    def copy(self):
        return self.with_params(self.params())

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def from_flat(self, flat):
        return self.with_params(unflatten(flat, self.params()))


def unflatten(flat, like):
    out, pos = [], 0
    for p in like:
        out.append(np.asarray(flat[pos:pos + p.size], dtype=float).reshape(p.shape).copy())
        pos += p.size
    return out


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, h, g):
    if name == "tanh":
        return g * (1.0 - h * h)
    if name == "relu":
        return g * (z > 0)
    return g


def forward(net, inputs):
    """Evaluate the network on a vector or a ``(n, n_in)`` matrix."""
    x = np.asarray(inputs, dtype=float)
    if x.shape[-1] != net.n_in or x.ndim > 2:
        raise ValueError(f"input has shape {x.shape}, network expects {net.n_in} features")
    h = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        h = _act(act, h @ w + b)
    return h


def forward_trace(net, inputs):
    """Forward pass that keeps what :func:`backward` needs."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    if x.shape[1] != net.n_in:
        raise ValueError(f"input has {x.shape[1]} features, network expects {net.n_in}")
    hs, zs = [x], []
    for w, b, act in zip(net.weights, net.biases, net.activations):
        z = hs[-1] @ w + b
        zs.append(z)
        hs.append(_act(act, z))
    return hs[-1], (hs, zs)


def backward(net, trace, grad_out, need_input_grad=False):
    """Reverse-mode pass: parameter gradients (``params()`` order) and optionally d/d input."""
    hs, zs = trace
    g = grad_out
    grads = [None] * (2 * len(net.weights))
    for k in range(len(net.weights) - 1, -1, -1):
        g = _act_grad(net.activations[k], zs[k], hs[k + 1], g)
        grads[2 * k] = hs[k].T @ g
        grads[2 * k + 1] = g.sum(axis=0)
        if k > 0 or need_input_grad:
            g = g @ net.weights[k].T
    return grads, (g if need_input_grad else None)


def softplus(y):
    return np.logaddexp(0.0, y)


def sigmoid(y):
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def grad_l2(net, inputs, targets, output_map="linear", eps=0.0):
    """Mean-over-rows squared error and its exact parameter gradients.

    ``output_map="softplus"`` compares ``softplus(y) + eps`` with the targets,
    which is how positive-valued heads are trained.
    """
    inputs = np.atleast_2d(inputs)
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0], -1)
    n = inputs.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    y, trace = forward_trace(net, inputs)
    if output_map == "softplus":
        pred = softplus(y) + eps
    elif output_map == "linear":
        pred = y
    else:
        raise ValueError(f"unknown output map {output_map!r}")
    resid = pred - targets
    loss = float(np.sum(resid * resid) / n)
    g = 2.0 * resid / n
    if output_map == "softplus":
        g = g * sigmoid(y)
    grads, _ = backward(net, trace, g)
    return loss, grads


@dataclass
class AdamState:
    m: list | None = None
    v: list | None = None
    t: int = 0


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns ``(new params, new state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    m = state.m if state.m is not None else [np.zeros_like(p) for p in params]
    v = state.v if state.v is not None else [np.zeros_like(p) for p in params]
    t = state.t + 1
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    new_p, new_m, new_v = [], [], []
    for p, g, mk, vk in zip(params, grads, m, v):
        mk = ADAM_BETA1 * mk + (1.0 - ADAM_BETA1) * g
        vk = ADAM_BETA2 * vk + (1.0 - ADAM_BETA2) * g * g
        new_p.append(p - lr * (mk / c1) / (np.sqrt(vk / c2) + ADAM_EPS))
        new_m.append(mk)
        new_v.append(vk)
    return new_p, AdamState(new_m, new_v, t)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 20
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.validation_fraction < 1.0):
            raise ConfigError("validation_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0 or self.learning_rate <= 0:
            raise ConfigError("batch_size >= 1, max_epochs >= 0 and learning_rate > 0 required")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class TrainState:
    """Everything needed to continue an interrupted :func:`fit` bit-for-bit."""

    params: list | None = None
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_params: list | None = None
    best_val: float = math.inf
    wait: int = 0
    history: list = field(default_factory=list)
    stopped: bool = False


def split_indices(n, cfg):
    """Deterministic train/validation split of ``n`` rows."""
    if n < 2:
        raise ValueError(f"need at least 2 rows to split into train/validation, got {n}")
    n_val = min(max(int(round(cfg.validation_fraction * n)), 1), n - 1)
    perm = np.random.default_rng([cfg.seed, 0x5EED]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def fit(params, loss_grad, val_loss, n_train, cfg, state=None):
    """Minibatch Adam with early stopping on a validation loss.

    Parameters
    ----------
    params : list of ndarray
        Initial parameters (not modified).
    loss_grad : callable
        ``loss_grad(params, rows) -> (loss, grads)`` on training rows ``rows``.
    val_loss : callable
        ``val_loss(params) -> float`` over the validation set.
    n_train : int
        Number of training rows.
    cfg : TrainConfig
    state : TrainState, optional
        Resume from (and update in place) this state.

    Returns
    -------
    best_params, history
        ``history`` holds one ``{"epoch", "train_loss", "val_loss"}`` dict per
        epoch; the returned parameters are those with the lowest validation
        loss seen, including the initial ones.
    """
    st = state if state is not None else TrainState()
    if st.params is None:
        st.params = [p.copy() for p in params]
        st.best_params = [p.copy() for p in params]
        st.best_val = float(val_loss(st.params))
        if not math.isfinite(st.best_val):
            raise TrainingError("non-finite validation loss at initialization", 0, None)
    while st.epoch < cfg.max_epochs and not st.stopped:
        epoch = st.epoch
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        total = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, n_train, cfg.batch_size)):
            rows = perm[start:start + cfg.batch_size]
            loss, grads = loss_grad(st.params, rows)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingError("non-finite loss or gradient", epoch, b)
            st.params, st.adam = adam_step(st.params, grads, st.adam, cfg.learning_rate)
            total += loss
            n_batches += 1
        val = float(val_loss(st.params))
        if not math.isfinite(val):
            raise TrainingError("non-finite validation loss", epoch, "validation")
        st.history.append({"epoch": epoch, "train_loss": total / max(n_batches, 1), "val_loss": val})
        st.epoch += 1
        if val < st.best_val:
            st.best_val = val
            st.best_params = [p.copy() for p in st.params]
            st.wait = 0
        else:
            st.wait += 1
            if st.wait >= cfg.patience:
                st.stopped = True
    return [p.copy() for p in st.best_params], list(st.history)


def train(net, data, cfg, output_map="linear", eps=0.0, state=None):
    """Fit ``net`` to ``(inputs, targets)`` under the L2 loss.

    Returns ``(best network, loss history)``; see :func:`fit`.
    """
    inputs, targets = data
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.asarray(targets, dtype=float).reshape(inputs.shape[0], -1)
    tr, va = split_indices(inputs.shape[0], cfg)
    x_tr, y_tr = inputs[tr], targets[tr]
    x_va, y_va = inputs[va], targets[va]

    def loss_grad(params, rows):
        return grad_l2(net.with_params(params, copy=False), x_tr[rows], y_tr[rows], output_map, eps)

    def val_loss(params):
        pred = forward(net.with_params(params, copy=False), x_va)
        if output_map == "softplus":
            pred = softplus(pred) + eps
        return float(np.sum((pred - y_va) ** 2) / len(y_va))

    best, history = fit(net.params(), loss_grad, val_loss, len(tr), cfg, state)
    return net.with_params(best), history


def running_min(history, key="val_loss"):
    return np.minimum.accumulate([h[key] for h in history]) if history else np.array([])


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_network(net, path):
    """JSON header line (sizes, activations, seed) + float64 parameter block."""
    header = {
        "format": "marginfer.mlp",
        "version": 1,
        "layer_sizes": list(net.layer_sizes),
        "activations": list(net.activations),
        "seed": int(net.seed),
        "n_params": int(net.n_params),
    }
    write_block(path, header, net.flat())


def load_network(path):
    header, flat, offset = read_block(path, ("layer_sizes", "activations", "seed"))
    sizes = header["layer_sizes"]
    template = MlpNetwork(sizes, header["activations"],
                          [np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                          [np.zeros(b) for b in sizes[1:]], int(header["seed"]))
    expect_count(flat, template.n_params, offset, "network checkpoint")
    return template.from_flat(flat)


def save_train_state(state, path):
    """Serialize a :class:`TrainState` (current params, Adam moments, bookkeeping)."""
    blocks = list(state.params) + list(state.best_params)
    if state.adam.m is not None:
        blocks += list(state.adam.m) + list(state.adam.v)
    header = {
        "format": "marginfer.train_state",
        "version": 1,
        "shapes": [list(p.shape) for p in state.params],
        "adam_t": state.adam.t,
        "has_moments": state.adam.m is not None,
        "epoch": state.epoch,
        "best_val": state.best_val,
        "wait": state.wait,
        "stopped": state.stopped,
        "history": state.history,
    }
    write_block(path, header, np.concatenate([b.ravel() for b in blocks]) if blocks else np.zeros(0))


def load_train_state(path):
    header, flat, offset = read_block(path, ("shapes", "adam_t", "epoch"))
    like = [np.zeros(s) for s in header["shapes"]]
    size = sum(p.size for p in like)
    n_blocks = 4 if header["has_moments"] else 2
    expect_count(flat, n_blocks * size, offset, "train state")
    groups = [unflatten(flat[i * size:(i + 1) * size], like) for i in range(n_blocks)]
    adam = AdamState(groups[2], groups[3], header["adam_t"]) if header["has_moments"] else AdamState()
    if header["has_moments"] and header["adam_t"] < 1:
        raise FormatError("train state has moments but adam_t < 1", offset=0)
    return TrainState(groups[0], adam, header["epoch"], groups[1], float(header["best_val"]),
                      header["wait"], header["history"], header.get("stopped", False))


def clone_state(state):
    return copy.deepcopy(state)
