"""
Per-sample uncertainty on a noisy chirp
=======================================

Here theta is the clean strain itself, 128 numbers, and x is that strain
plus coloured noise. Masses and distance are drawn from their priors and
never shown to the network, so the reported sigma at each time step is
already marginalized over them.

With only 3500 simulations the mean head fits its own training rows
better than new data. The variance head is therefore trained on
cross-fitted residuals, each row predicted by a mean head that did not
see it.
"""

import numpy as np

from marginfer.moment_net import fit_hierarchy, predict
from marginfer.nn_core import TrainConfig
from marginfer.sim_models import ChirpModel, simulate_chirp

model = ChirpModel()
hier = fit_hierarchy(simulate_chirp(model, 3500, seed=0), cfg=TrainConfig(seed=0), residual_folds=5)

test = simulate_chirp(model, 1000, seed=1)
means, var, _ = predict(hier, test.x)
sigma = np.sqrt(var)

coverage = np.mean(np.abs(test.theta - means) <= sigma, axis=0)
print(f"±1 sigma coverage per time step: min {coverage.min():.3f}, max {coverage.max():.3f}")

# sigma over the window for one event; it grows where the signal is loud
t_ms = -1e3 * model.times_to_merger
for k in range(0, 128, 16):
    print(f"t = {t_ms[k]:7.2f} ms   strain {test.theta[0, k]:+.3f}   estimate {means[0, k]:+.3f} ± {sigma[0, k]:.3f}")

# Less noise should mean tighter estimates.
quiet = model.with_noise_scale(0.5)
quiet_hier = fit_hierarchy(simulate_chirp(quiet, 3500, seed=0), cfg=TrainConfig(seed=0), residual_folds=5)
_, quiet_var, _ = predict(quiet_hier, simulate_chirp(quiet, 1000, seed=1).x)
print(f"mean sigma {sigma.mean():.4f} at the default PSD, {np.sqrt(quiet_var).mean():.4f} at half")
