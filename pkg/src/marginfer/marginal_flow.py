"""Conditional two-dimensional masked autoregressive flows.

A :class:`FlowModel` models ``q(alpha, beta | x)`` for one parameter pair.
Each stage is an autoregressive affine map: the first coordinate is shifted
and scaled by a conditioner that sees only ``x``, the second by one that sees
``(first coordinate, x)``. Stages alternate which coordinate goes first.
Mapping the data through every stage must yield a standard normal, so

    log q = log N(u; 0, I) - sum of log-scales

with ``u`` the output of the final stage. Training minimizes the mean
negative log-density of prior-sampled ``(theta_alpha, theta_beta, x)``
triples; every other parameter is simply ignored, which is what makes the
learned density the marginal posterior.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from . import nn_core
from .errors import ConfigError, FormatError
from .moment_net import MomentEstimates, Standardizer
from .nn_core import MlpNetwork, TrainConfig, TrainState, backward, forward, forward_trace

LOG_SCALE_CLAMP = 7.0
DEFAULT_STAGES = 5
DEFAULT_HIDDEN = (64, 64)
DEFAULT_MEMBERS = 3
LOG_2PI = np.log(2.0 * np.pi)


def _order(stage):
    return (0, 1) if stage % 2 == 0 else (1, 0)


@dataclass(eq=False)
class FlowModel:
    """Stack of conditional autoregressive affine stages over one parameter pair.

    ``stages[k]`` is ``(first, second)``: the conditioner networks for the
    coordinate transformed first (input ``x``) and second (input
    ``[first coordinate, x]``). Both output ``(shift, log-scale)``.
    """

    pair: tuple
    stages: list
    x_scale: Standardizer
    theta_scale: Standardizer

    @classmethod
    def create(cls, pair, dim_x, x_scale=None, theta_scale=None, n_layers=DEFAULT_STAGES,
               hidden=DEFAULT_HIDDEN, seed=0):
        """Randomly initialized hidden layers with zeroed output layers (identity flow)."""
        stages = []
        for k in range(n_layers):
            first = MlpNetwork.create((dim_x, *hidden, 2), seed=seed * 1009 + 2 * k, zero_output=True)
            second = MlpNetwork.create((dim_x + 1, *hidden, 2), seed=seed * 1009 + 2 * k + 1, zero_output=True)
            stages.append((first, second))
        x_scale = x_scale or Standardizer(np.zeros(dim_x), np.ones(dim_x))
        theta_scale = theta_scale or Standardizer(np.zeros(2), np.ones(2))
        return cls(tuple(pair), stages, x_scale, theta_scale)

    @classmethod
    def zeros(cls, dim_x, n_layers=DEFAULT_STAGES, hidden=DEFAULT_HIDDEN, pair=(0, 1)):
        """A flow whose every conditioner parameter is zero: exactly a standard 2-D normal."""
        flow = cls.create(pair, dim_x, n_layers=n_layers, hidden=hidden)
        for net in flow.networks():
            for p in net.params():
                p[:] = 0.0
        return flow

    @property
    def dim_x(self):
        return self.stages[0][0].n_in

    @property
    def n_layers(self):
        return len(self.stages)

    def networks(self):
        return [net for stage in self.stages for net in stage]

    def params(self):
        return [p for net in self.networks() for p in net.params()]

    def with_params(self, params, copy=True):
        params = list(params)
        stages, pos = [], 0
        for first, second in self.stages:
            nf = len(first.params())
            ns = len(second.params())
            stages.append((first.with_params(params[pos:pos + nf], copy),
                           second.with_params(params[pos + nf:pos + nf + ns], copy)))
            pos += nf + ns
        return FlowModel(self.pair, stages, self.x_scale, self.theta_scale)


@dataclass(eq=False)
class FlowEnsemble:
    """Equal-weight mixture of flows for the same pair."""

    members: list

    def __post_init__(self):
        if not self.members:
            raise ConfigError("ensemble needs at least one member")
        pairs = {tuple(m.pair) for m in self.members}
        if len(pairs) != 1:
            raise ConfigError(f"ensemble members model different pairs: {sorted(pairs)}")

    @property
    def pair(self):
        return tuple(self.members[0].pair)

    @property
    def dim_x(self):
        return self.members[0].dim_x


# ---------------------------------------------------------------------------
# density evaluation and gradients
# ---------------------------------------------------------------------------


def _stage_forward(first, second, order, z, xs):
    i, j = order
    out_f, tr_f = forward_trace(first, xs)
    a_i = np.clip(out_f[:, 1], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    e_i = np.exp(-a_i)
    u_i = (z[:, i] - out_f[:, 0]) * e_i
    out_s, tr_s = forward_trace(second, np.column_stack([z[:, i], xs]))
    a_j = np.clip(out_s[:, 1], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
    e_j = np.exp(-a_j)
    u_j = (z[:, j] - out_s[:, 0]) * e_j
    u = np.empty_like(z)
    u[:, i] = u_i
    u[:, j] = u_j
    cache = (tr_f, tr_s, out_f[:, 1], out_s[:, 1], e_i, e_j, u_i, u_j)
    return u, a_i + a_j, cache


def _log_prob_std(flow, z, xs, keep=False):
    logdet = np.zeros(z.shape[0])
    caches = []
    for k, (first, second) in enumerate(flow.stages):
        z, sum_a, cache = _stage_forward(first, second, _order(k), z, xs)
        logdet -= sum_a
        caches.append(cache)
    lp = -0.5 * np.sum(z * z, axis=1) - LOG_2PI + logdet
    return (lp, z, caches) if keep else lp


def _nll_and_grads(flow, z, xs):
    """Mean negative log-density (standardized units) and parameter gradients."""
    n = z.shape[0]
    lp, u, caches = _log_prob_std(flow, z, xs, keep=True)
    g = u / n
    inv_n = 1.0 / n
    grads_by_stage = []
    for k in range(flow.n_layers - 1, -1, -1):
        first, second = flow.stages[k]
        i, j = _order(k)
        tr_f, tr_s, raw_i, raw_j, e_i, e_j, u_i, u_j = caches[k]
        g_aj = (-g[:, j] * u_j + inv_n) * (np.abs(raw_j) < LOG_SCALE_CLAMP)
        gs, gin = backward(second, tr_s, np.column_stack([-g[:, j] * e_j, g_aj]), need_input_grad=True)
        g_ai = (-g[:, i] * u_i + inv_n) * (np.abs(raw_i) < LOG_SCALE_CLAMP)
        gf, _ = backward(first, tr_f, np.column_stack([-g[:, i] * e_i, g_ai]))
        g_new = np.empty_like(g)
        g_new[:, i] = g[:, i] * e_i + gin[:, 0]
        g_new[:, j] = g[:, j] * e_j
        g = g_new
        grads_by_stage.append(gf + gs)
    grads = [gr for stage in reversed(grads_by_stage) for gr in stage]
    return float(-np.mean(lp)), grads


def _prepare(model, alpha_beta, x):
    ab = np.asarray(alpha_beta, dtype=float)
    x = np.asarray(x, dtype=float)
    single = ab.ndim == 1 and x.ndim == 1
    ab = np.atleast_2d(ab)
    x = np.atleast_2d(x)
    if ab.shape[1] != 2:
        raise ValueError(f"alpha_beta must have 2 columns, got shape {ab.shape}")
    if x.shape[1] != model.dim_x:
        raise ValueError(f"x has {x.shape[1]} entries, flow expects {model.dim_x}")
    if x.shape[0] == 1 and ab.shape[0] > 1:
        x = np.broadcast_to(x, (ab.shape[0], x.shape[1]))
    elif ab.shape[0] == 1 and x.shape[0] > 1:
        ab = np.broadcast_to(ab, (x.shape[0], 2))
    if not (np.all(np.isfinite(ab)) and np.all(np.isfinite(x))):
        raise ValueError("non-finite input to log_prob")
    return ab, x, single


def _flow_log_prob(flow, ab, x):
    z = flow.theta_scale.apply(ab)
    xs = flow.x_scale.apply(x)
    return _log_prob_std(flow, z, xs) - np.log(flow.theta_scale.std).sum()


def log_prob(model, alpha_beta, x):
    """Log-density (nats) of ``(alpha, beta)`` given ``x``.

    Accepts single points or row-aligned batches; a single ``x`` broadcasts
    against many points and vice versa. Ensembles return the log of the
    mean member density.
    """
    ab, x, single = _prepare(model, alpha_beta, x)
    if isinstance(model, FlowEnsemble):
        lps = np.stack([_flow_log_prob(m, ab, x) for m in model.members])
        lp = logsumexp(lps, axis=0) - np.log(len(model.members))
    else:
        lp = _flow_log_prob(model, ab, x)
    return float(lp[0]) if single else lp


def _flow_sample(flow, xs, u):
    z = u.copy()
    for k in range(flow.n_layers - 1, -1, -1):
        first, second = flow.stages[k]
        i, j = _order(k)
        out_f = forward(first, xs)
        zi = z[:, i] * np.exp(np.clip(out_f[:, 1], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)) + out_f[:, 0]
        out_s = forward(second, np.column_stack([zi, xs]))
        zj = z[:, j] * np.exp(np.clip(out_s[:, 1], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)) + out_s[:, 0]
        z[:, i] = zi
        z[:, j] = zj
    return z


def sample(model, x, n, seed=0):
    """Draw ``n`` samples of ``(alpha, beta)`` given a single ``x``. Shape ``(n, 2)``.

    Ensembles pick a member uniformly at random for every draw.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim_x,):
        raise ValueError(f"x has shape {x.shape}, expected ({model.dim_x},)")
    rng = np.random.default_rng(seed)
    members = model.members if isinstance(model, FlowEnsemble) else [model]
    which = rng.integers(len(members), size=n) if len(members) > 1 else np.zeros(n, dtype=int)
    u = rng.standard_normal((n, 2))
    out = np.empty((n, 2))
    for k, flow in enumerate(members):
        rows = np.nonzero(which == k)[0]
        if rows.size == 0:
            continue
        xs = np.broadcast_to(flow.x_scale.apply(x), (rows.size, flow.dim_x))
        out[rows] = flow.theta_scale.invert(_flow_sample(flow, xs, u[rows]))
    return out


def flow_moments(model, x, n=10_000, seed=0):
    """Sample mean, variances and covariance of the pair under the flow."""
    s = sample(model, x, n, seed)
    c = np.cov(s, rowvar=False)
    a, b = model.pair
    return MomentEstimates(s.mean(axis=0), np.diag(c), {(min(a, b), max(a, b)): float(c[0, 1])}, (a, b))


def grid_density(model, x, bounds, resolution):
    """Density on the cell centres of a regular grid.

    Parameters
    ----------
    bounds : ((alpha_lo, alpha_hi), (beta_lo, beta_hi))
    resolution : int or (int, int)
        Cells per axis, at least 2.

    Returns
    -------
    alpha, beta, density
        Cell-centre coordinates and the ``(len(alpha), len(beta))`` density
        matrix; ``density.sum() * cell_area`` is the captured mass.
    """
    res = (resolution, resolution) if np.isscalar(resolution) else tuple(resolution)
    if len(res) != 2 or min(res) < 2:
        raise ValueError(f"resolution must be >= 2 per axis, got {resolution}")
    (alo, ahi), (blo, bhi) = bounds
    if not (alo < ahi and blo < bhi):
        raise ValueError(f"inverted or empty bounds {bounds}")
    ha = (ahi - alo) / res[0]
    hb = (bhi - blo) / res[1]
    alpha = alo + ha * (np.arange(res[0]) + 0.5)
    beta = blo + hb * (np.arange(res[1]) + 0.5)
    aa, bb = np.meshgrid(alpha, beta, indexing="ij")
    pts = np.column_stack([aa.ravel(), bb.ravel()])
    members = model.members if isinstance(model, FlowEnsemble) else [model]
    dens = np.mean([np.exp(_flow_log_prob(m, pts, np.broadcast_to(x, (len(pts), m.dim_x)))) for m in members],
                   axis=0)
    return alpha, beta, dens.reshape(res)


def grid_mass(alpha, beta, density):
    return float(density.sum() * (alpha[1] - alpha[0]) * (beta[1] - beta[0]))


def write_grid_csv(path, alpha, beta, density):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "beta", "density"])
        for ia, a in enumerate(alpha):
            for ib, b in enumerate(beta):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(density[ia, ib]))])


def read_grid_csv(path):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    alpha = np.unique(rows[:, 0])
    beta = np.unique(rows[:, 1])
    return alpha, beta, rows[:, 2].reshape(len(alpha), len(beta))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _validate_pair(pair, dim_theta):
    a, b = (int(v) for v in pair)
    if a == b:
        raise ConfigError(f"flow pair ({a}, {b}) must name two different parameters")
    if not (0 <= a < dim_theta and 0 <= b < dim_theta):
        raise IndexError(f"pair ({a}, {b}) out of range for {dim_theta} parameters")
    return a, b


def train_member(pair, batch, cfg, n_layers=DEFAULT_STAGES, hidden=DEFAULT_HIDDEN, state=None):
    """Fit one flow; returns ``(flow, loss history)``."""
    a, b = _validate_pair(pair, batch.dim_theta)
    ab = batch.theta[:, [a, b]]
    x_scale = Standardizer.fit(batch.x)
    th_scale = Standardizer.fit(ab)
    z = th_scale.apply(ab)
    xs = x_scale.apply(batch.x)
    flow = FlowModel.create((a, b), batch.dim_x, x_scale, th_scale, n_layers, hidden, cfg.seed)
    tr, va = nn_core.split_indices(batch.n_sims, cfg)
    z_tr, x_tr, z_va, x_va = z[tr], xs[tr], z[va], xs[va]

    def loss_grad(params, rows):
        return _nll_and_grads(flow.with_params(params, copy=False), z_tr[rows], x_tr[rows])

    def val_loss(params):
        return float(-np.mean(_log_prob_std(flow.with_params(params, copy=False), z_va, x_va)))

    best, hist = nn_core.fit(flow.params(), loss_grad, val_loss, len(tr), cfg, state)
    return flow.with_params(best), hist


def member_seed(cfg, m):
    return cfg.seed + 7919 * m


def train_flow(pair, batch, cfg=None, n_members=DEFAULT_MEMBERS, n_layers=DEFAULT_STAGES,
               hidden=DEFAULT_HIDDEN, threads=1, states=None):
    """Train an ensemble of ``n_members`` flows that differ only by seed.

    ``states`` is an optional dict of per-member
    :class:`~marginfer.nn_core.TrainState` keyed by member index, created
    when missing and updated in place for later resumption.

    Returns ``(FlowEnsemble, histories)``.
    """
    cfg = cfg or TrainConfig()
    _validate_pair(pair, batch.dim_theta)
    if n_members < 1:
        raise ConfigError("n_members must be >= 1")

    if states is not None:
        for m in range(n_members):
            states.setdefault(m, TrainState())

    def one(m):
        st = states[m] if states is not None else None
        return train_member(pair, batch, replace(cfg, seed=member_seed(cfg, m)), n_layers, hidden, st)

    if threads > 1 and n_members > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(n_members)))
    else:
        results = [one(m) for m in range(n_members)]
    return FlowEnsemble([r[0] for r in results]), [r[1] for r in results]


def monte_carlo_kl(target, model, x, n=10_000, seed=0):
    """KL(target || model) at one ``x`` from ``n`` draws of a 2-D Gaussian ``target``."""
    s = target.sample(n, np.random.default_rng(seed))
    return float(np.mean(target.log_prob(s) - log_prob(model, s, x)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_ensemble(ens, directory, extra=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    members = []
    for m, flow in enumerate(ens.members):
        files = []
        for k, (first, second) in enumerate(flow.stages):
            f1, f2 = f"m{m}_s{k}_first.ckpt", f"m{m}_s{k}_second.ckpt"
            nn_core.save_network(first, d / f1)
            nn_core.save_network(second, d / f2)
            files.append([f1, f2])
        members.append({
            "stages": files,
            "x_scale": flow.x_scale.to_dict(),
            "theta_scale": flow.theta_scale.to_dict(),
        })
    manifest = {
        "format": "marginfer.flow_ensemble",
        "version": 1,
        "pair": list(ens.pair),
        "log_scale_clamp": LOG_SCALE_CLAMP,
        "members": members,
    }
    if extra:
        manifest.update(extra)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_ensemble(directory):
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no flow manifest in {d}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON", offset=exc.pos) from None
    if m.get("format") != "marginfer.flow_ensemble":
        raise FormatError(f"{path}: not a flow-ensemble manifest", offset=0)
    members = []
    for entry in m["members"]:
        stages = [(nn_core.load_network(d / f1), nn_core.load_network(d / f2)) for f1, f2 in entry["stages"]]
        members.append(FlowModel(tuple(m["pair"]), stages, Standardizer.from_dict(entry["x_scale"]),
                                 Standardizer.from_dict(entry["theta_scale"])))
    return FlowEnsemble(members)
