"""
An MCMC reference for the same posterior
========================================

The stretch-move ensemble sampler needs the likelihood, which the neural
estimators do not. On the linear-Gaussian model it supplies an
independent check. Burn-in comes from the autocorrelation time, and
means are compared in units of their Monte Carlo standard error.
"""

import numpy as np

from marginfer.analytic_oracle import conjugate_posterior
from marginfer.mcmc_ref import (
    McmcConfig,
    chain_marginal_moments,
    effective_sample_size,
    linear_gaussian_log_post,
    run_chain,
    suggest_burn_in,
)
from marginfer.sim_models import LinearGaussianModel, simulate_linear_gaussian

model = LinearGaussianModel.default(16)
x_obs = simulate_linear_gaussian(model, 1, seed=3).x[0]
exact = conjugate_posterior(model, x_obs)

rng = np.random.default_rng(0)
init = rng.multivariate_normal(model.prior_mean, model.prior_cov, size=128)
chain = run_chain(linear_gaussian_log_post(model, x_obs), init, 25_000, McmcConfig(seed=0, vectorized=True))
print(f"acceptance rate {chain.acceptance_rate:.3f}")

burn = suggest_burn_in(chain)
mom = chain_marginal_moments(chain, burn_in=burn)
ess = np.array([effective_sample_size(chain, p, burn) for p in range(16)])
z = (mom.means - exact.mean) / np.sqrt(np.diag(exact.cov) / ess)
print(f"burn-in {burn} steps; ESS from {ess.min():.0f} to {ess.max():.0f}")
print("mean errors in Monte Carlo standard errors:", np.round(z, 2))
print("sigma ratio chain/exact:", np.round(mom.std / exact.std, 3))
