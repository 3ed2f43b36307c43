"""Priors, forward models and simulation batches.

Two models are provided:

* :class:`LinearGaussianModel` -- ``x = A theta + n`` with a correlated
  Gaussian prior and non-stationary Gaussian noise. Its posterior is known in
  closed form (see :mod:`marginfer.analytic_oracle`).
* :class:`ChirpModel` -- a Newtonian-order inspiral chirp in coloured noise.
  The inference target is the clean strain time series itself; the masses and
  distance that generated it are kept as batch metadata.

Random streams
--------------
All randomness comes from numpy's PCG64 generator. Rows are generated in
blocks of :data:`ROW_BLOCK`; block ``k`` draws from
``SeedSequence(seed, spawn_key=(k,))`` so any block can be produced
independently and results do not depend on how the work is split.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from ._binio import expect_count, read_block, write_block
from .errors import ConfigError, FormatError

ROW_BLOCK = 4096

# physical constants (SI)
T_SUN = 4.925490947e-6  # G M_sun / c^3 [s]
C_LIGHT = 299792458.0
MPC = 3.0856775814913673e22  # [m]
STRAIN_UNIT = 1e-21


def _block_rng(seed, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(block,))))


def _blocks(n):
    for k, start in enumerate(range(0, n, ROW_BLOCK)):
        yield k, start, min(start + ROW_BLOCK, n)


def _spd_cholesky(mat, name):
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ConfigError(f"{name} is not symmetric positive definite") from None


def _check_symmetric(mat, name):
    scale = max(np.abs(mat).max(), 1.0)
    if not np.allclose(mat, mat.T, rtol=0, atol=1e-12 * scale):
        raise ConfigError(f"{name} is not symmetric")


# ---------------------------------------------------------------------------
# Linear-Gaussian model
# ---------------------------------------------------------------------------


@dataclass
class LinearGaussianModel:
    """``theta ~ N(prior_mean, prior_cov)``, ``x = design @ theta + N(0, noise_cov)``.

    ``noise_cov`` must be positive definite, except that an all-zero matrix is
    accepted and means noiseless data.
    """

    design: np.ndarray
    prior_mean: np.ndarray
    prior_cov: np.ndarray
    noise_cov: np.ndarray
    tag: str = "linear_gaussian"

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.prior_mean = np.atleast_1d(np.asarray(self.prior_mean, dtype=float))
        self.prior_cov = np.atleast_2d(np.asarray(self.prior_cov, dtype=float))
        self.noise_cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        dx, dt = self.design.shape
        if self.prior_mean.shape != (dt,):
            raise ConfigError(f"prior_mean has shape {self.prior_mean.shape}, expected ({dt},)")
        if self.prior_cov.shape != (dt, dt):
            raise ConfigError(f"prior_cov has shape {self.prior_cov.shape}, expected ({dt}, {dt})")
        if self.noise_cov.shape != (dx, dx):
            raise ConfigError(f"noise_cov has shape {self.noise_cov.shape}, expected ({dx}, {dx})")
        _check_symmetric(self.prior_cov, "prior_cov")
        _check_symmetric(self.noise_cov, "noise_cov")
        self._prior_chol = _spd_cholesky(self.prior_cov, "prior_cov")
        if self.noiseless:
            self._noise_chol = np.zeros_like(self.noise_cov)
        else:
            self._noise_chol = _spd_cholesky(self.noise_cov, "noise_cov")

    @property
    def dim_theta(self):
        return self.design.shape[1]

    @property
    def dim_x(self):
        return self.design.shape[0]

    @property
    def noiseless(self):
        return not np.any(self.noise_cov)

    @property
    def prior_std(self):
        return np.sqrt(np.diag(self.prior_cov))

    @classmethod
    def default(cls, dim=16, corr_length=5.0, noise_lo=0.5, noise_hi=2.0):
        """Identity design, ramped noise variance, exponentially correlated prior."""
        idx = np.arange(dim)
        prior_cov = np.exp(-np.abs(idx[:, None] - idx[None, :]) / corr_length)
        noise_var = np.linspace(noise_lo, noise_hi, dim) if dim > 1 else np.array([noise_lo])
        return cls(np.eye(dim), np.zeros(dim), prior_cov, np.diag(noise_var))

    def log_likelihood(self, theta, x_obs):
        """Gaussian log-likelihood, vectorized over rows of ``theta``."""
        theta = np.atleast_2d(theta)
        resid = x_obs - theta @ self.design.T
        white = sla.solve_triangular(self._noise_chol, resid.T, lower=True)
        logdet = 2.0 * np.log(np.diag(self._noise_chol)).sum()
        return -0.5 * (np.sum(white**2, axis=0) + logdet + self.dim_x * np.log(2 * np.pi))

    def log_prior(self, theta):
        theta = np.atleast_2d(theta)
        white = sla.solve_triangular(self._prior_chol, (theta - self.prior_mean).T, lower=True)
        logdet = 2.0 * np.log(np.diag(self._prior_chol)).sum()
        return -0.5 * (np.sum(white**2, axis=0) + logdet + self.dim_theta * np.log(2 * np.pi))

    def to_config(self):
        return {
            "kind": "linear_gaussian",
            "design": self.design.tolist(),
            "prior_mean": self.prior_mean.tolist(),
            "prior_cov": self.prior_cov.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "tag": self.tag,
        }


def simulate_linear_gaussian(model, n, seed):
    """Draw ``n`` prior-predictive pairs from ``model``. Deterministic in ``seed``."""
    n = int(n)
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    theta = np.empty((n, model.dim_theta))
    x = np.empty((n, model.dim_x))
    for k, lo, hi in _blocks(n):
        rng = _block_rng(seed, k)
        m = hi - lo
        th = model.prior_mean + rng.standard_normal((m, model.dim_theta)) @ model._prior_chol.T
        eps = rng.standard_normal((m, model.dim_x)) @ model._noise_chol.T
        theta[lo:hi] = th
        x[lo:hi] = th @ model.design.T + eps
    return SimulationBatch(theta, x, model.tag, int(seed))


# ---------------------------------------------------------------------------
# Chirp model
# ---------------------------------------------------------------------------


def chirp_mass(m1, m2):
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    return (m1 * m2) ** 0.6 / (m1 + m2) ** 0.2


def default_psd(n_samples=128, dt=1.0 / 2048, amplitude=0.3, f_knee=60.0, f_low=20.0):
    """Coloured-noise power per rfft bin, with a steep low-frequency wall.

    Shape ``(f_knee/f)^4 + 1 + (f/f_knee)^2`` with ``f`` floored at ``f_low``,
    normalized to unit mean and scaled by ``amplitude**2`` so that the
    per-sample noise standard deviation is roughly ``amplitude``.
    """
    f = np.maximum(np.fft.rfftfreq(n_samples, dt), f_low)
    shape = (f_knee / f) ** 4 + 1.0 + (f / f_knee) ** 2
    return amplitude**2 * shape / shape.mean()


@dataclass
class ChirpModel:
    """Inspiral chirp ``A(t) sin(Phi(t))`` over a window ending ``t_end`` s before merger.

    Frequency follows the leading-order inspiral law
    ``f = (5 / (256 tau))^(3/8) (G Mc / c^3)^(-5/8) / pi`` with ``tau`` the
    time to coalescence, and the amplitude scales as
    ``Mc^(5/3) f^(2/3) / distance``. Strain is in units of 1e-21; distances
    in Mpc; masses in solar masses.
    """

    n_samples: int = 128
    dt: float = 1.0 / 2048
    mass_prior_lo: float = 10.0
    mass_prior_hi: float = 30.0
    dist_prior_lo: float = 500.0
    dist_prior_hi: float = 1500.0
    noise_psd: np.ndarray | None = None
    t_end: float = 0.05
    tag: str = "chirp"

    def __post_init__(self):
        n = int(self.n_samples)
        if n < 2 or n & (n - 1):
            raise ConfigError(f"n_samples must be a power of two >= 2 for radix-2 noise synthesis, got {n}")
        self.n_samples = n
        if not (0 < self.mass_prior_lo < self.mass_prior_hi):
            raise ConfigError("mass prior needs 0 < mass_prior_lo < mass_prior_hi")
        if not (0 < self.dist_prior_lo < self.dist_prior_hi):
            raise ConfigError("distance prior needs 0 < dist_prior_lo < dist_prior_hi")
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("dt and t_end must be positive")
        if self.noise_psd is None:
            self.noise_psd = default_psd(n, self.dt)
        self.noise_psd = np.asarray(self.noise_psd, dtype=float)
        if self.noise_psd.shape != (n // 2 + 1,):
            raise ConfigError(f"noise_psd must have {n // 2 + 1} entries (rfft bins), got {self.noise_psd.shape}")
        if np.any(self.noise_psd < 0):
            raise ConfigError("noise_psd must be non-negative")

    @property
    def dim_theta(self):
        return self.n_samples

    @property
    def dim_x(self):
        return self.n_samples

    @property
    def times_to_merger(self):
        return self.t_end + self.dt * np.arange(self.n_samples - 1, -1, -1)

    def waveform(self, m1, m2, chi):
        """Clean strain for parameter arrays (broadcast), shape ``(..., n_samples)``."""
        tc = T_SUN * chirp_mass(m1, m2)[..., None]
        tau = self.times_to_merger
        theta_n = tau / (5.0 * tc)
        phase = -2.0 * theta_n**0.625
        freq = theta_n ** (-0.375) / (8.0 * np.pi * tc)
        amp = 4.0 * C_LIGHT * tc ** (5.0 / 3.0) * (np.pi * freq) ** (2.0 / 3.0)
        amp = amp / (np.asarray(chi, dtype=float)[..., None] * MPC) / STRAIN_UNIT
        return amp * np.sin(phase)

    def frequency(self, m1, m2):
        tc = T_SUN * chirp_mass(m1, m2)[..., None]
        return (self.times_to_merger / (5.0 * tc)) ** (-0.375) / (8.0 * np.pi * tc)

    def colour(self, white):
        """Shape white noise rows by ``sqrt(noise_psd)`` in the Fourier domain."""
        spec = np.fft.rfft(white, axis=-1) * np.sqrt(self.noise_psd)
        return np.fft.irfft(spec, n=self.n_samples, axis=-1)

    def with_noise_scale(self, factor):
        """Copy with the noise PSD multiplied by ``factor``."""
        cfg = self.to_config()
        cfg["noise_psd"] = (self.noise_psd * factor).tolist()
        return model_from_config(cfg)

    def to_config(self):
        return {
            "kind": "chirp",
            "n_samples": self.n_samples,
            "dt": self.dt,
            "mass_prior_lo": self.mass_prior_lo,
            "mass_prior_hi": self.mass_prior_hi,
            "dist_prior_lo": self.dist_prior_lo,
            "dist_prior_hi": self.dist_prior_hi,
            "noise_psd": self.noise_psd.tolist(),
            "t_end": self.t_end,
            "tag": self.tag,
        }


def simulate_chirp(model, n, seed):
    """Draw ``n`` (clean signal, noisy signal) pairs.

    ``batch.meta`` holds the generating ``(m1, m2, chi)`` per row.
    """
    n = int(n)
    if n < 0:
        raise ConfigError(f"n must be >= 0, got {n}")
    theta = np.empty((n, model.n_samples))
    x = np.empty((n, model.n_samples))
    meta = np.empty((n, 3))
    for k, lo, hi in _blocks(n):
        rng = _block_rng(seed, k)
        m = hi - lo
        masses = rng.uniform(model.mass_prior_lo, model.mass_prior_hi, size=(m, 2))
        chi = rng.uniform(model.dist_prior_lo, model.dist_prior_hi, size=m)
        clean = model.waveform(masses[:, 0], masses[:, 1], chi)
        white = rng.standard_normal((m, model.n_samples))
        theta[lo:hi] = clean
        x[lo:hi] = clean + model.colour(white)
        meta[lo:hi] = np.column_stack([masses, chi])
    return SimulationBatch(theta, x, model.tag, int(seed), meta=meta)


# ---------------------------------------------------------------------------
# Batches and the dataset format
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SimulationBatch:
    """Paired prior draws ``theta`` and simulated data ``x`` (one row per simulation)."""

    theta: np.ndarray
    x: np.ndarray
    model_tag: str
    seed: int
    meta: np.ndarray | None = field(default=None)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        if self.theta.ndim != 2 or self.x.ndim != 2:
            raise ConfigError("theta and x must be 2-D arrays")
        if self.theta.shape[0] != self.x.shape[0]:
            raise ConfigError(f"theta has {self.theta.shape[0]} rows but x has {self.x.shape[0]}")
        if self.meta is not None:
            self.meta = np.asarray(self.meta, dtype=float).reshape(self.n_sims, -1)

    @property
    def n_sims(self):
        return self.theta.shape[0]

    @property
    def dim_theta(self):
        return self.theta.shape[1]

    @property
    def dim_x(self):
        return self.x.shape[1]

    def __eq__(self, other):
        if not isinstance(other, SimulationBatch):
            return NotImplemented
        same_meta = (self.meta is None and other.meta is None) or (
            self.meta is not None and other.meta is not None and _bits_equal(self.meta, other.meta)
        )
        return (
            self.model_tag == other.model_tag
            and self.seed == other.seed
            and _bits_equal(self.theta, other.theta)
            and _bits_equal(self.x, other.x)
            and same_meta
        )

    def subset(self, rows):
        meta = None if self.meta is None else self.meta[rows]
        return SimulationBatch(self.theta[rows], self.x[rows], self.model_tag, self.seed, meta)

    def header(self):
        hdr = {
            "n_sims": self.n_sims,
            "dim_theta": self.dim_theta,
            "dim_x": self.dim_x,
            "model_tag": self.model_tag,
            "seed": self.seed,
        }
        if self.meta is not None:
            hdr["dim_meta"] = self.meta.shape[1]
        return hdr

    def fingerprint(self):
        """SHA-256 over the serialized header and payload."""
        h = hashlib.sha256(json.dumps(self.header(), sort_keys=True).encode())
        h.update(self._payload().tobytes())
        return h.hexdigest()

    def _payload(self):
        cols = [self.theta, self.x] + ([self.meta] if self.meta is not None else [])
        return np.ascontiguousarray(np.hstack(cols), dtype="<f8")


def _bits_equal(a, b):
    return a.shape == b.shape and np.ascontiguousarray(a, "<f8").tobytes() == np.ascontiguousarray(b, "<f8").tobytes()


_BATCH_KEYS = ("n_sims", "dim_theta", "dim_x", "model_tag", "seed")


def write_batch(batch, path):
    """Write ``batch`` as a JSON header line followed by row-major float64 records.

    Each record is ``theta`` then ``x`` (then the optional metadata columns,
    announced by a ``dim_meta`` header key).
    """
    write_block(path, batch.header(), batch._payload())


def read_batch(path):
    header, flat, offset = read_block(path, _BATCH_KEYS)
    try:
        n = int(header["n_sims"])
        dt = int(header["dim_theta"])
        dx = int(header["dim_x"])
        dm = int(header.get("dim_meta", 0))
        seed = int(header["seed"])
    except (TypeError, ValueError):
        raise FormatError("non-integer size field in header", offset=0) from None
    if min(n, dt, dx, dm) < 0:
        raise FormatError("negative size in header", offset=0)
    width = dt + dx + dm
    expect_count(flat, n * width, offset, "dataset")
    rows = flat.reshape(n, width)
    meta = rows[:, dt + dx:].copy() if dm else None
    return SimulationBatch(rows[:, :dt].copy(), rows[:, dt:dt + dx].copy(), str(header["model_tag"]), seed, meta)


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------


def model_from_config(cfg):
    """Build a model from a JSON-style dict.

    Linear-Gaussian configs may give any of ``design`` (matrix, ``"identity"``
    or ``"zero"``), ``prior_mean``, ``prior_cov``, ``noise_cov`` or
    ``noise_var``; anything omitted falls back to
    :meth:`LinearGaussianModel.default` for ``dim_theta``. Chirp configs take
    the :class:`ChirpModel` fields, with ``noise_amplitude`` as a shortcut for
    the default PSD shape.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("model config must be a JSON object")
    kind = cfg.get("kind", "linear_gaussian")
    try:
        if kind == "linear_gaussian":
            return _linear_gaussian_from_config(cfg)
        if kind == "chirp":
            return _chirp_from_config(cfg)
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid {kind} model config: {exc}") from None
    raise ConfigError(f"unknown model kind {kind!r}")


def _linear_gaussian_from_config(cfg):
    if "dim_theta" in cfg:
        dim = int(cfg["dim_theta"])
    elif "prior_cov" in cfg:
        dim = len(cfg["prior_cov"])
    else:
        raise ConfigError("linear_gaussian config needs dim_theta or prior_cov")
    if dim < 1:
        raise ConfigError(f"dim_theta must be positive, got {dim}")
    base = LinearGaussianModel.default(dim, corr_length=float(cfg.get("corr_length", 5.0)))
    design = cfg.get("design", "identity")
    if design == "identity":
        design = np.eye(int(cfg.get("dim_x", dim)), dim)
    elif design == "zero":
        design = np.zeros((int(cfg.get("dim_x", dim)), dim))
    design = np.asarray(design, dtype=float)
    if "noise_cov" in cfg:
        noise = cfg["noise_cov"]
    elif "noise_var" in cfg:
        noise = np.diag(np.asarray(cfg["noise_var"], dtype=float))
    elif design.shape[0] == dim:
        noise = base.noise_cov
    else:
        noise = np.diag(np.linspace(0.5, 2.0, design.shape[0]))
    return LinearGaussianModel(
        design,
        cfg.get("prior_mean", base.prior_mean),
        cfg.get("prior_cov", base.prior_cov),
        noise,
        tag=cfg.get("tag", "linear_gaussian"),
    )


def _chirp_from_config(cfg):
    fields = {k: cfg[k] for k in ("n_samples", "dt", "mass_prior_lo", "mass_prior_hi",
                                  "dist_prior_lo", "dist_prior_hi", "t_end", "tag") if k in cfg}
    model = ChirpModel(**fields)
    if "noise_psd" in cfg:
        model.noise_psd = np.asarray(cfg["noise_psd"], dtype=float)
    elif "noise_amplitude" in cfg:
        model.noise_psd = default_psd(model.n_samples, model.dt, float(cfg["noise_amplitude"]))
    model.__post_init__()
    return model


def load_model_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"model config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    return model_from_config(cfg)


def simulate(model, n, seed):
    """Dispatch on model type."""
    if isinstance(model, LinearGaussianModel):
        return simulate_linear_gaussian(model, n, seed)
    if isinstance(model, ChirpModel):
        return simulate_chirp(model, n, seed)
    raise TypeError(f"unsupported model {type(model).__name__}")
