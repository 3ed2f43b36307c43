"""Direct estimation of low-dimensional marginal posteriors from simulations.

Two estimators share one training set of prior-sampled ``(theta, x)`` pairs:

* :mod:`marginfer.moment_net` regresses posterior means, variances and
  pairwise covariances;
* :mod:`marginfer.marginal_flow` fits a conditional 2-D density per pair.

:mod:`marginfer.analytic_oracle` and :mod:`marginfer.mcmc_ref` provide ground
truth for checking them.
"""

__version__ = "0.1.0"
