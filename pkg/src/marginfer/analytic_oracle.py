"""Closed-form Gaussian posteriors for the linear-Gaussian model.

This is the ground truth the learned estimators are judged against, so it
sticks to Cholesky factorizations in float64 throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import ConfigError, NumericError


@dataclass(eq=False)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean length {d}")
        scale = max(np.abs(self.cov).max(), np.finfo(float).tiny)
        if np.abs(self.cov - self.cov.T).max() > 1e-12 * scale:
            raise ValueError("cov is not symmetric")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            raise ValueError("cov is not positive definite") from None

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def std(self):
        return np.sqrt(np.diag(self.cov))

    def logdet(self):
        return 2.0 * np.log(np.diag(self._chol)).sum()

    def log_prob(self, points):
        """Log-density at ``points`` (shape ``(d,)`` or ``(n, d)``)."""
        pts = np.asarray(points, dtype=float)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts)
        white = sla.solve_triangular(self._chol, (pts - self.mean).T, lower=True)
        lp = -0.5 * (np.sum(white**2, axis=0) + self.logdet() + self.dim * np.log(2 * np.pi))
        return lp[0] if single else lp

    def sample(self, n, rng):
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def to_dict(self):
        return {"mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["cov"])


def _chol_or_raise(mat, name):
    try:
        return sla.cho_factor(mat, lower=True)
    except np.linalg.LinAlgError:
        raise NumericError(f"{name} is singular or not positive definite") from None


def posterior_precision_terms(model):
    """Return ``(posterior cov, gain)`` with ``mean = gain @ x + offset``.

    The posterior covariance of a linear-Gaussian model does not depend on the
    observation, so these are computed once and reused for many ``x``.
    """
    if model.noiseless:
        raise NumericError("noise_cov is singular (noiseless model); posterior is degenerate")
    noise_f = _chol_or_raise(model.noise_cov, "noise_cov")
    prior_f = _chol_or_raise(model.prior_cov, "prior_cov")
    a = model.design
    ninv_a = sla.cho_solve(noise_f, a)
    precision = a.T @ ninv_a + sla.cho_solve(prior_f, np.eye(model.dim_theta))
    prec_f = _chol_or_raise(precision, "posterior precision")
    cov = sla.cho_solve(prec_f, np.eye(model.dim_theta))
    cov = 0.5 * (cov + cov.T)
    gain = sla.cho_solve(prec_f, ninv_a.T)
    offset = sla.cho_solve(prec_f, sla.cho_solve(prior_f, model.prior_mean))
    return cov, gain, offset


def conjugate_posterior(model, x_obs):
    """Exact posterior ``N(mean, cov)`` of a :class:`LinearGaussianModel` at ``x_obs``.

    ``cov = (A^T N^-1 A + P^-1)^-1`` and
    ``mean = cov (A^T N^-1 x_obs + P^-1 mu)``.
    """
    x_obs = np.asarray(x_obs, dtype=float)
    if x_obs.shape != (model.dim_x,):
        raise ConfigError(f"x_obs has shape {x_obs.shape}, expected ({model.dim_x},)")
    cov, gain, offset = posterior_precision_terms(model)
    return GaussianDensity(gain @ x_obs + offset, cov)


def posterior_means(model, xs):
    """Posterior means for many observations at once, shape ``(n, dim_theta)``."""
    _, gain, offset = posterior_precision_terms(model)
    return np.atleast_2d(xs) @ gain.T + offset


def marginalize(g, keep):
    """Marginal of ``g`` over the coordinates ``keep`` (order preserved)."""
    keep = list(keep)
    if not keep:
        raise ValueError("keep must be non-empty")
    if len(set(keep)) != len(keep):
        raise ValueError(f"duplicate indices in keep: {keep}")
    for i in keep:
        if not (0 <= int(i) < g.dim) or int(i) != i:
            raise IndexError(f"index {i} out of range for dimension {g.dim}")
    idx = np.asarray(keep, dtype=int)
    return GaussianDensity(g.mean[idx], g.cov[np.ix_(idx, idx)])


def gaussian_kl(p, q):
    """KL(p || q) in nats between two Gaussians."""
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    qf = (q._chol, True)
    trace = np.trace(sla.cho_solve(qf, p.cov))
    diff = q.mean - p.mean
    maha = diff @ sla.cho_solve(qf, diff)
    kl = 0.5 * (trace + maha - p.dim + q.logdet() - p.logdet())
    return max(float(kl), 0.0)
