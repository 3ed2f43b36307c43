"""Moment networks: regression heads whose L2 optima are posterior moments.

The hierarchy has three kinds of heads, all conditioned on the raw data
vector ``x``:

* the mean head ``F`` regresses ``theta`` on ``x``; its L2 minimizer is the
  posterior mean;
* the variance head ``G`` regresses ``(theta - F(x))**2`` on ``x`` with ``F``
  frozen; its minimizer is the per-parameter posterior variance;
* a covariance head for a pair ``(a, b)`` regresses
  ``(theta_a - F_a(x)) (theta_b - F_b(x))`` on ``x``.

Every parameter is drawn from the prior when simulating, so each head
targets the *marginal* moment with all other parameters integrated out.

All heads work in standardized units (training-set mean and standard
deviation of ``x`` and ``theta``); outputs are mapped back on the way out.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .errors import ConfigError, FormatError
from .nn_core import MlpNetwork, TrainConfig, TrainState, forward, softplus

EPS_VAR = 1e-8
COV_CLAMP = 0.999
DEFAULT_HIDDEN = (128, 128)
MANIFEST_VERSION = 1


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data):
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        # constant columns pass through unscaled
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    def apply(self, a):
        return (a - self.mean) / self.std

    def invert(self, a):
        return a * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class MomentEstimates:
    """Marginal posterior moments for one observation.

    ``params`` lists the parameter indices that ``means`` and ``variances``
    refer to; ``pair_covs`` is keyed by index pairs ``(a, b)`` with ``a < b``.
    """

    means: np.ndarray
    variances: np.ndarray
    pair_covs: dict = field(default_factory=dict)
    params: tuple | None = None

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if self.params is None:
            self.params = tuple(range(len(self.means)))
        self.params = tuple(int(p) for p in self.params)

    @property
    def std(self):
        return np.sqrt(self.variances)

    def _pos(self, i):
        return self.params.index(i)

    def mean_of(self, i):
        return float(self.means[self._pos(i)])

    def var_of(self, i):
        return float(self.variances[self._pos(i)])

    def cov(self, a, b):
        if a == b:
            return self.var_of(a)
        key = (min(a, b), max(a, b))
        return float(self.pair_covs[key])

    def pair_gaussian(self, a, b):
        """Mean 2-vector and 2x2 covariance for the pair ``(a, b)``."""
        mean = np.array([self.mean_of(a), self.mean_of(b)])
        cov = np.array([[self.var_of(a), self.cov(a, b)], [self.cov(a, b), self.var_of(b)]])
        return mean, cov

    def to_dict(self):
        return {
            "params": list(self.params),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
            "pair_covs": [[a, b, float(c)] for (a, b), c in sorted(self.pair_covs.items())],
        }

    @classmethod
    def from_dict(cls, d):
        covs = {(int(a), int(b)): float(c) for a, b, c in d.get("pair_covs", [])}
        return cls(d["means"], d["variances"], covs, tuple(d["params"]))


@dataclass(eq=False)
class MomentNetworkHierarchy:
    """Trained heads plus the standardization they were trained under.

    ``cov_nets`` maps a pair ``(a, b)`` to ``(network, output index)``; in
    the per-pair layout each network has a single output, while the default
    joint layout shares one multi-output network among all pairs.
    """

    x_scale: Standardizer
    theta_scale: Standardizer
    mean_net: MlpNetwork
    var_net: MlpNetwork | None = None
    cov_nets: dict = field(default_factory=dict)
    eps_var: float = EPS_VAR
    trained_on: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    @property
    def dim_x(self):
        return self.mean_net.n_in

    @property
    def dim_theta(self):
        return self.mean_net.n_out

    @property
    def pairs(self):
        return sorted(self.cov_nets)

    def residuals(self, batch):
        """Standardized ``theta - F(x)`` on a batch, with ``F`` frozen."""
        xs = self.x_scale.apply(batch.x)
        return self.theta_scale.apply(batch.theta) - forward(self.mean_net, xs)


def _check_batch(batch):
    if batch.n_sims < 2:
        raise ConfigError(f"need at least 2 simulations to train, got {batch.n_sims}")


def train_mean(batch, cfg=None, hidden=DEFAULT_HIDDEN, seed=None, state=None):
    """Fit the mean head on a prior-sampled batch.

    Returns a :class:`MomentNetworkHierarchy` holding only the mean head and
    the standardization constants; pass it to :func:`train_var` and
    :func:`train_cov`.
    """
    cfg = cfg or TrainConfig()
    _check_batch(batch)
    x_scale = Standardizer.fit(batch.x)
    th_scale = Standardizer.fit(batch.theta)
    seed = cfg.seed if seed is None else seed
    # standardized targets have mean zero, so the constant start is the prior mean
    net = _constant_start((batch.dim_x, *hidden, batch.dim_theta), seed, 0.0)
    net, hist = nn_core.train(net, (x_scale.apply(batch.x), th_scale.apply(batch.theta)), cfg, state=state)
    return MomentNetworkHierarchy(
        x_scale, th_scale, net,
        trained_on={"model_tag": batch.model_tag, "fingerprint": batch.fingerprint(), "n_sims": batch.n_sims},
        histories={"mean": hist},
    )


def cross_fit_residuals(batch, hierarchy, folds, cfg=None, hidden=DEFAULT_HIDDEN, states=None):
    """Standardized residuals where each row is predicted by a mean head that never saw it.

    Rows ``j::folds`` form fold ``j``; a fresh mean head is trained on the
    other folds (same shape, config and standardization as the main head)
    and evaluated on fold ``j``. Small training sets let the main head fit
    its own rows better than new data, and in-sample residuals then
    understate the spread the variance head should report.
    """
    cfg = cfg or TrainConfig()
    folds = int(folds)
    if folds < 2 or folds > batch.n_sims:
        raise ConfigError(f"residual_folds must be between 2 and n_sims, got {folds}")
    xs = hierarchy.x_scale.apply(batch.x)
    ts = hierarchy.theta_scale.apply(batch.theta)
    resid = np.empty_like(ts)
    rows = np.arange(batch.n_sims)
    for j in range(folds):
        held = rows % folds == j
        net = _constant_start((batch.dim_x, *hidden, batch.dim_theta), cfg.seed + 10 + j, 0.0)
        net, _ = nn_core.train(net, (xs[~held], ts[~held]), cfg, state=_state_for(states, f"fold_{j}"))
        resid[held] = ts[held] - forward(net, xs[held])
    return resid


def train_var(batch, hierarchy, cfg=None, hidden=DEFAULT_HIDDEN, seed=None, state=None, resid=None):
    """Fit the variance head against squared residuals of the frozen mean head.

    The raw output ``y`` is reported as ``softplus(y) + eps_var`` (standardized
    units), so variances are always positive. ``resid`` overrides the
    in-sample residuals, e.g. with :func:`cross_fit_residuals`.
    """
    cfg = cfg or TrainConfig()
    _check_batch(batch)
    if resid is None:
        resid = hierarchy.residuals(batch)
    seed = cfg.seed + 1 if seed is None else seed
    target = resid**2
    net = _constant_start((batch.dim_x, *hidden, batch.dim_theta), seed,
                          softplus_inverse(np.maximum(target.mean(axis=0) - hierarchy.eps_var, 1e-12)))
    net, hist = nn_core.train(net, (hierarchy.x_scale.apply(batch.x), target), cfg,
                              output_map="softplus", eps=hierarchy.eps_var, state=state)
    hierarchy.histories["var"] = hist
    return net


def softplus_inverse(y):
    return y + np.log(-np.expm1(-y))


def _constant_start(sizes, seed, bias):
    """Network whose initial output is the constant ``bias``.

    Heads start at the best constant fit of their target, so early stopping
    only accepts x-dependence that actually lowers the validation loss.
    """
    net = MlpNetwork.create(sizes, seed=seed, zero_output=True)
    net.biases[-1][:] = bias
    return net


def _validate_pairs(pairs, dim):
    out = []
    for pair in pairs:
        a, b = (int(v) for v in pair)
        if a == b:
            raise ConfigError(f"pair ({a}, {b}) repeats a parameter")
        if not (0 <= a < dim and 0 <= b < dim):
            raise IndexError(f"pair ({a}, {b}) out of range for {dim} parameters")
        out.append((min(a, b), max(a, b)))
    if len(set(out)) != len(out):
        raise ConfigError("duplicate pairs")
    return out


def train_cov(batch, hierarchy, pairs, cfg=None, hidden=DEFAULT_HIDDEN, layout="joint", threads=1,
              states=None, resid=None):
    """Fit covariance heads for ``pairs`` against residual products of the frozen mean head.

    ``layout="per_pair"`` trains one single-output network per pair (these
    are independent and run on ``threads`` workers); ``layout="joint"``
    trains one network with an output per pair.

    ``states``, if given, is a dict of :class:`~marginfer.nn_core.TrainState`
    keyed ``"cov_joint"`` or ``"cov_a_b"``; missing entries are created and
    all are updated in place, so a later call can resume them.

    Returns the ``{pair: (network, output index)}`` mapping.
    """
    cfg = cfg or TrainConfig()
    _check_batch(batch)
    pairs = _validate_pairs(pairs, batch.dim_theta)
    if not pairs:
        return {}
    if resid is None:
        resid = hierarchy.residuals(batch)
    xs = hierarchy.x_scale.apply(batch.x)

    if layout == "joint":
        targets = np.column_stack([resid[:, a] * resid[:, b] for a, b in pairs])
        net = _constant_start((batch.dim_x, *hidden, len(pairs)), cfg.seed + 2, targets.mean(axis=0))
        net, hist = nn_core.train(net, (xs, targets), cfg, state=_state_for(states, "cov_joint"))
        hierarchy.histories["cov_joint"] = hist
        return {p: (net, k) for k, p in enumerate(pairs)}
    if layout != "per_pair":
        raise ConfigError(f"unknown covariance layout {layout!r}")

    def one(pair):
        a, b = pair
        target = resid[:, a] * resid[:, b]
        net = _constant_start((batch.dim_x, *hidden, 1), cfg.seed + 1000 + a * batch.dim_theta + b, target.mean())
        return pair, nn_core.train(net, (xs, target), cfg, state=_state_for(states, f"cov_{a}_{b}"))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(p) for p in pairs]
    out = {}
    for pair, (net, hist) in results:
        out[pair] = (net, 0)
        hierarchy.histories[f"cov_{pair[0]}_{pair[1]}"] = hist
    return out


def _state_for(states, key):
    if states is None:
        return None
    if key not in states:
        states[key] = TrainState()
    return states[key]


def _finished(state, cfg):
    return state.stopped or state.epoch >= cfg.max_epochs


def fit_hierarchy(batch, pairs=(), cfg=None, var_cfg=None, cov_cfg=None, hidden=DEFAULT_HIDDEN,
                  layout="joint", threads=1, states=None, residual_folds=1):
    """Train mean, then variance and covariance heads against the frozen mean.

    With ``states`` (a dict, possibly holding states from an earlier call)
    every head resumes where it stopped. If the mean head is not finished,
    the other states were fitted against a different mean and are dropped.

    ``residual_folds > 1`` fits the second-moment heads to cross-fitted
    residuals (:func:`cross_fit_residuals`) instead of in-sample ones.
    """
    cfg = cfg or TrainConfig()
    if states is not None and "mean" in states and not _finished(states["mean"], cfg):
        for key in [k for k in states if k != "mean" and not k.startswith("fold_")]:
            del states[key]
    if states is not None and any(k.startswith("fold_") and not _finished(v, cfg) for k, v in states.items()):
        for key in [k for k in states if k == "var" or k.startswith("cov_")]:
            del states[key]
    hier = train_mean(batch, cfg, hidden, state=_state_for(states, "mean"))
    resid = None
    if residual_folds > 1:
        resid = cross_fit_residuals(batch, hier, residual_folds, cfg, hidden, states)
    hier.var_net = train_var(batch, hier, var_cfg or cfg, hidden, state=_state_for(states, "var"), resid=resid)
    hier.cov_nets = train_cov(batch, hier, pairs, cov_cfg or cfg, hidden, layout, threads, states, resid=resid)
    hier.trained_on["residual_folds"] = int(residual_folds)
    return hier


def predict(hierarchy, xs):
    """Vectorized moments for rows of ``xs``.

    Returns ``(means, variances, covs)`` with ``means`` and ``variances`` of
    shape ``(n, dim_theta)`` and ``covs`` a ``{pair: (n,)}`` dict, after the
    variance floor and the Cauchy-Schwarz clamp.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    if xs.shape[1] != hierarchy.dim_x:
        raise ValueError(f"x has {xs.shape[1]} entries, hierarchy expects {hierarchy.dim_x}")
    if hierarchy.var_net is None:
        raise ConfigError("hierarchy has no variance head")
    z = hierarchy.x_scale.apply(xs)
    sd = hierarchy.theta_scale.std
    means = hierarchy.theta_scale.invert(forward(hierarchy.mean_net, z))
    var_std = softplus(forward(hierarchy.var_net, z)) + hierarchy.eps_var
    variances = np.maximum(var_std * sd**2, hierarchy.eps_var)
    covs = {}
    cache = {}
    for pair, (net, k) in sorted(hierarchy.cov_nets.items()):
        if id(net) not in cache:
            cache[id(net)] = forward(net, z)
        a, b = pair
        raw = cache[id(net)][:, k] * sd[a] * sd[b]
        bound = COV_CLAMP * np.sqrt(variances[:, a] * variances[:, b])
        covs[pair] = np.clip(raw, -bound, bound)
    return means, variances, covs


def estimate(hierarchy, x_obs):
    """Marginal posterior moments at a single observation."""
    x_obs = np.asarray(x_obs, dtype=float)
    if x_obs.shape != (hierarchy.dim_x,):
        raise ValueError(f"x_obs has shape {x_obs.shape}, expected ({hierarchy.dim_x},)")
    means, variances, covs = predict(hierarchy, x_obs[None, :])
    return MomentEstimates(means[0], variances[0], {p: float(c[0]) for p, c in covs.items()})


def time_estimate(hierarchy, x_obs, repeats=20):
    """Median wall-clock seconds per :func:`estimate` call."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        estimate(hierarchy, x_obs)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_hierarchy(hierarchy, directory, extra=None):
    """Write network files plus ``manifest.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    nn_core.save_network(hierarchy.mean_net, d / "mean.ckpt")
    if hierarchy.var_net is not None:
        nn_core.save_network(hierarchy.var_net, d / "var.ckpt")
    files = {}
    pair_entries = []
    for pair, (net, k) in sorted(hierarchy.cov_nets.items()):
        if id(net) not in files:
            name = "cov_joint.ckpt" if net.n_out > 1 else f"cov_{pair[0]}_{pair[1]}.ckpt"
            nn_core.save_network(net, d / name)
            files[id(net)] = name
        pair_entries.append({"alpha": pair[0], "beta": pair[1], "file": files[id(net)], "index": k})
    manifest = {
        "format": "marginfer.moment_hierarchy",
        "version": MANIFEST_VERSION,
        "eps_var": hierarchy.eps_var,
        "cov_clamp": COV_CLAMP,
        "x_scale": hierarchy.x_scale.to_dict(),
        "theta_scale": hierarchy.theta_scale.to_dict(),
        "mean_file": "mean.ckpt",
        "var_file": "var.ckpt" if hierarchy.var_net is not None else None,
        "pairs": pair_entries,
        "trained_on": hierarchy.trained_on,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_hierarchy(directory):
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no moment-network manifest in {d}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON", offset=exc.pos) from None
    if m.get("format") != "marginfer.moment_hierarchy":
        raise FormatError(f"{path}: not a moment-hierarchy manifest", offset=0)
    mean_net = nn_core.load_network(d / m["mean_file"])
    var_net = nn_core.load_network(d / m["var_file"]) if m.get("var_file") else None
    loaded = {}
    cov_nets = {}
    for e in m["pairs"]:
        if e["file"] not in loaded:
            loaded[e["file"]] = nn_core.load_network(d / e["file"])
        cov_nets[(int(e["alpha"]), int(e["beta"]))] = (loaded[e["file"]], int(e["index"]))
    return MomentNetworkHierarchy(
        Standardizer.from_dict(m["x_scale"]), Standardizer.from_dict(m["theta_scale"]),
        mean_net, var_net, cov_nets, float(m["eps_var"]), m.get("trained_on", {}),
    )
