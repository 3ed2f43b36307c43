"""Affine-invariant ensemble sampler (stretch move) and chain diagnostics.

The ensemble is split into two halves that are updated alternately; every
walker in the active half proposes against a random partner from the other
half, ``y = x_k + z (x_j - x_k)`` with ``z`` drawn from ``g(z) ~ 1/sqrt(z)``
on ``[1/a, a]``, and accepts with probability
``min(1, z^(d-1) p(y) / p(x_j))``.

All random numbers for a half-step are drawn up front from one PCG64
stream, independently of the walker positions, so the chain is a
deterministic function of the seed and of ``log_post``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._binio import expect_count, read_block, write_block
from .errors import ConfigError, DiagnosticError
from .moment_net import MomentEstimates


@dataclass
class McmcConfig:
    stretch_a: float = 2.0
    seed: int = 0
    vectorized: bool = False
    """If true, ``log_post`` maps an ``(n, d)`` array to ``(n,)`` values."""

    def __post_init__(self):
        if self.stretch_a <= 1.0:
            raise ConfigError("stretch_a must exceed 1")


@dataclass
class EnsembleState:
    walkers: np.ndarray
    log_posts: np.ndarray
    step_count: int = 0
    accept_count: int = 0
    stretch_a: float = 2.0
    seed: int = 0

    @property
    def acceptance_rate(self):
        n = self.step_count * self.walkers.shape[0]
        return self.accept_count / n if n else float("nan")


@dataclass
class Chain:
    """Stored walker positions, shape ``(n_steps, n_walkers, d)``."""

    samples: np.ndarray
    acceptance_rate: float
    seed: int = 0
    stretch_a: float = 2.0
    state: EnsembleState | None = None

    @property
    def n_steps(self):
        return self.samples.shape[0]

    @property
    def n_walkers(self):
        return self.samples.shape[1]

    @property
    def dim(self):
        return self.samples.shape[2]


def _evaluate(log_post, pts, vectorized):
    if vectorized:
        return np.asarray(log_post(pts), dtype=float).reshape(len(pts))
    return np.array([float(log_post(p)) for p in pts])


def sample_stretch(rng, a, n):
    """Draws from ``g(z) ~ 1/sqrt(z)`` on ``[1/a, a]`` by inverting its CDF."""
    return ((a - 1.0) * rng.random(n) + 1.0) ** 2 / a


def run_chain(log_post, init, n_steps, cfg=None, state=None):
    """Run the split-half stretch-move sampler.

    Parameters
    ----------
    log_post : callable
        Log target density (up to a constant); vector -> float, or
        ``(n, d) -> (n,)`` when ``cfg.vectorized``.
    init : ndarray, shape (n_walkers, d)
        Starting positions; ``n_walkers`` must be even and at least ``2 d``.
    n_steps : int
    cfg : McmcConfig
    state : EnsembleState, optional
        Continue from a previous run instead of ``init``.

    Returns
    -------
    Chain
    """
    cfg = cfg or McmcConfig()
    if state is not None:
        walkers = state.walkers.copy()
        lp = state.log_posts.copy()
        # continuing a chain must not replay the random numbers already used
        rng = np.random.default_rng([cfg.seed, state.step_count])
    else:
        walkers = np.array(init, dtype=float, copy=True)
        if walkers.ndim != 2:
            raise ConfigError("init must be an (n_walkers, d) array")
        lp = _evaluate(log_post, walkers, cfg.vectorized)
        rng = np.random.default_rng([cfg.seed, 0])
    n_walkers, d = walkers.shape
    if n_walkers < 2 * d or n_walkers % 2:
        raise ConfigError(f"need an even number of walkers >= 2*d = {2 * d}, got {n_walkers}")
    if not np.all(np.isfinite(lp)):
        bad = np.nonzero(~np.isfinite(lp))[0].tolist()
        raise ValueError(f"log_post is not finite at initial walkers {bad}")

    a = cfg.stretch_a
    half = n_walkers // 2
    halves = (np.arange(half), np.arange(half, n_walkers))
    out = np.empty((n_steps, n_walkers, d))
    accepted = 0
    for step in range(n_steps):
        for h in (0, 1):
            active, other = halves[h], halves[1 - h]
            z = sample_stretch(rng, a, half)
            partners = other[rng.integers(half, size=half)]
            log_u = np.log(rng.random(half))
            xj = walkers[active]
            xk = walkers[partners]
            prop = xk + z[:, None] * (xj - xk)
            lp_prop = _evaluate(log_post, prop, cfg.vectorized)
            log_ratio = (d - 1) * np.log(z) + lp_prop - lp[active]
            ok = log_u < log_ratio
            walkers[active[ok]] = prop[ok]
            lp[active[ok]] = lp_prop[ok]
            accepted += int(ok.sum())
        out[step] = walkers
    prev_steps = state.step_count if state is not None else 0
    prev_acc = state.accept_count if state is not None else 0
    new_state = EnsembleState(walkers, lp, prev_steps + n_steps, prev_acc + accepted, a, cfg.seed)
    rate = accepted / (n_steps * n_walkers) if n_steps else float("nan")
    return Chain(out, rate, cfg.seed, a, new_state)


def _samples(chain):
    return chain.samples if isinstance(chain, Chain) else np.asarray(chain, dtype=float)


def flatten(chain, burn_in=0, thin=1):
    s = _samples(chain)
    if s.ndim == 2:
        s = s[:, :, None]
    if burn_in >= s.shape[0]:
        raise ValueError(f"burn_in {burn_in} leaves no samples from {s.shape[0]} steps")
    kept = s[burn_in::thin]
    return kept.reshape(-1, kept.shape[-1])


def chain_marginal_moments(chain, keep=None, burn_in=0, thin=1):
    """Sample means, variances and pairwise covariances of the ``keep`` columns."""
    flat = flatten(chain, burn_in, thin)
    if flat.shape[0] < 2:
        raise ValueError("need at least two retained samples")
    keep = list(range(flat.shape[1])) if keep is None else [int(k) for k in keep]
    sub = flat[:, keep]
    cov = np.atleast_2d(np.cov(sub, rowvar=False))
    covs = {}
    for i, a in enumerate(keep):
        for j in range(i + 1, len(keep)):
            b = keep[j]
            covs[(min(a, b), max(a, b))] = float(cov[i, j])
    return MomentEstimates(sub.mean(axis=0), np.diag(cov).copy(), covs, tuple(keep))


def autocorrelation(x):
    """Normalized autocorrelation of a 1-D series (FFT based)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    acf = np.fft.irfft(f * np.conj(f))[:n]
    return acf / acf[0]


def integrated_time(series):
    """``1 + 2 sum(rho_t)`` using Geyer's initial positive sequence.

    ``series`` is ``(n_steps,)`` or ``(n_steps, n_walkers)``; walker
    autocorrelation functions are averaged before summation.
    """
    s = np.asarray(series, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    n = s.shape[0]
    if n < 4:
        raise DiagnosticError(f"chain of {n} steps is too short for an autocorrelation estimate")
    if not np.all(np.isfinite(s)):
        raise DiagnosticError("chain contains non-finite values")
    centred = s - s.mean(axis=0)
    if not np.any(centred):
        raise DiagnosticError("chain is constant; autocorrelation time undefined")
    acfs = []
    for w in range(s.shape[1]):
        if np.any(centred[:, w]):
            acfs.append(autocorrelation(s[:, w]))
    rho = np.mean(acfs, axis=0)
    total = 0.0
    for k in range(n // 2):
        gamma = rho[2 * k] + rho[2 * k + 1]
        if gamma <= 0:
            break
        total += gamma
    else:
        raise DiagnosticError("autocorrelation did not decay within the chain")
    return 2.0 * total - 1.0


def effective_sample_size(chain, param=0, burn_in=0):
    """``N_total / (1 + 2 sum(rho_t))`` for one parameter.

    Raises :class:`DiagnosticError` when the chain is shorter than ten
    autocorrelation times (the estimate would not be trustworthy) or constant.
    """
    s = _samples(chain)
    if s.ndim == 1:
        series = s[burn_in:]
    elif s.ndim == 2:
        series = s[burn_in:, param]
    else:
        series = s[burn_in:, :, param]
    tau = integrated_time(series)
    n_steps = series.shape[0]
    if n_steps < 10 * tau:
        raise DiagnosticError(f"chain of {n_steps} steps is shorter than 10 x tau_int = {10 * tau:.1f}")
    n_total = series.size
    return n_total / tau


def suggest_burn_in(chain, factor=5):
    """``factor`` times the largest integrated time over parameters (in steps)."""
    s = _samples(chain)
    taus = [integrated_time(s[:, :, p]) for p in range(s.shape[2])]
    return int(math.ceil(factor * max(taus)))


def gaussian_log_post(g):
    """Vectorized log-density for a :class:`~marginfer.analytic_oracle.GaussianDensity`."""
    return g.log_prob


def linear_gaussian_log_post(model, x_obs):
    """Unnormalized log posterior of a linear-Gaussian model (vectorized)."""

    def lp(theta):
        return model.log_likelihood(theta, x_obs) + model.log_prior(theta)

    return lp


def save_chain(chain, path):
    header = {
        "format": "marginfer.chain",
        "version": 1,
        "n_steps": chain.n_steps,
        "n_walkers": chain.n_walkers,
        "d": chain.dim,
        "seed": int(chain.seed),
        "stretch_a": chain.stretch_a,
        "acceptance_rate": chain.acceptance_rate,
    }
    write_block(path, header, chain.samples)


def load_chain(path):
    header, flat, offset = read_block(path, ("n_steps", "n_walkers", "d"))
    shape = (int(header["n_steps"]), int(header["n_walkers"]), int(header["d"]))
    expect_count(flat, shape[0] * shape[1] * shape[2], offset, "chain")
    return Chain(flat.reshape(shape), float(header.get("acceptance_rate", float("nan"))),
                 int(header.get("seed", 0)), float(header.get("stretch_a", 2.0)))
