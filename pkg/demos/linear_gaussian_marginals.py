"""
Marginal moments of a 16-parameter linear-Gaussian model
========================================================

A moment network never sees a likelihood. It regresses parameters drawn
from the prior onto the data they produced, and the least-squares optimum
of that regression is the posterior mean. A second network fitted to the
squared residuals gives the posterior variance, and a third fitted to
residual products gives covariances.

The linear-Gaussian model has a closed-form posterior, so every number
below can be checked.
"""

import numpy as np

from marginfer.analytic_oracle import posterior_precision_terms
from marginfer.moment_net import estimate, fit_hierarchy, predict
from marginfer.nn_core import TrainConfig
from marginfer.sim_models import LinearGaussianModel, simulate_linear_gaussian

# Identity design, correlated prior, noise variance ramping from 0.5 to 2.
model = LinearGaussianModel.default(16)
train = simulate_linear_gaussian(model, 20_000, seed=0)
test = simulate_linear_gaussian(model, 1000, seed=1)

# Mean, variance and three covariance heads. Takes a minute or two on one core.
pairs = [(0, 1), (0, 2), (7, 8)]
hier = fit_hierarchy(train, pairs, TrainConfig(seed=0))

means, var, covs = predict(hier, test.x)
cov, gain, offset = posterior_precision_terms(model)
truth = test.x @ gain.T + offset

rmse = np.sqrt(np.mean(((means - truth) / model.prior_std) ** 2, axis=0))
print("mean RMSE per component, in prior sigma:")
print(np.round(rmse, 3))

# The posterior width does not depend on x for this model, so the network
# should return nearly the same sigma everywhere.
sd = np.sqrt(np.diag(cov))
print("analytic sigma      :", np.round(sd[:4], 3))
print("network sigma, mean :", np.round(np.sqrt(var).mean(axis=0)[:4], 3))
print("network sigma, spread over x:", np.round(np.sqrt(var).std(axis=0)[:4], 4))

for p in pairs:
    print(f"cov{p}: analytic {cov[p]:+.4f}, network median {np.median(covs[p]):+.4f}")

# ±1 sigma intervals should contain the truth about 68% of the time.
inside = np.abs(test.theta - means) <= np.sqrt(var)
print(f"coverage of ±1 sigma: {inside.mean():.3f}")

# One observation at a time, e.g. to hand to a corner plot.
est = estimate(hier, test.x[0])
mean01, cov01 = est.pair_gaussian(0, 1)
print("Gaussian summary of (theta_0, theta_1) for the first test point:")
print(mean01, cov01, sep="\n")
