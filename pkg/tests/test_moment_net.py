import tempfile

import numpy as np
import pytest

from marginfer.analytic_oracle import conjugate_posterior, posterior_means, posterior_precision_terms
from marginfer.errors import ConfigError
from marginfer.moment_net import (
    COV_CLAMP,
    EPS_VAR,
    MomentEstimates,
    cross_fit_residuals,
    estimate,
    fit_hierarchy,
    load_hierarchy,
    predict,
    save_hierarchy,
    train_cov,
    train_mean,
    train_var,
)
from marginfer.nn_core import TrainConfig, forward
from marginfer.sim_models import LinearGaussianModel, SimulationBatch, simulate_linear_gaussian

SMALL = (32, 32)
CFG = TrainConfig(seed=0)


def mean_head(h, xs):
    """F alone, for hierarchies without a variance head."""
    return h.theta_scale.invert(forward(h.mean_net, h.x_scale.apply(xs)))


@pytest.fixture(scope="module")
def one_d():
    m = LinearGaussianModel([[1.0]], [0.0], [[1.0]], [[1.0]])
    batch = simulate_linear_gaussian(m, 50_000, seed=1)
    return m, batch, fit_hierarchy(batch, (), CFG, hidden=SMALL)


def test_one_d_mean_head(one_d):
    _, _, h = one_d
    xs = np.linspace(-3, 3, 61)[:, None]
    means, _, _ = predict(h, xs)
    assert np.max(np.abs(means[:, 0] - xs[:, 0] / 2)) < 0.05


def test_one_d_variance_head(one_d):
    _, _, h = one_d
    _, var, _ = predict(h, np.linspace(-3, 3, 61)[:, None])
    assert np.all(np.abs(var[:, 0] / 0.5 - 1) < 0.10)


def test_duplicated_parameter_cov_matches_var(one_d):
    """Covariance head on a pair of identical columns regresses the variance target."""
    _, batch, h = one_d
    dup = SimulationBatch(np.column_stack([batch.theta, batch.theta]), batch.x, "dup", batch.seed)
    hd = train_mean(dup, CFG, SMALL)
    hd.var_net = train_var(dup, hd, CFG, SMALL)
    hd.cov_nets = train_cov(dup, hd, [(0, 1)], CFG, SMALL)
    xs = np.linspace(-3, 3, 61)[:, None]
    _, var, covs = predict(hd, xs)
    # each is within 10% of 0.5, so they agree to 0.1 absolute
    assert np.max(np.abs(covs[(0, 1)] - var[:, 0])) < 0.1


def test_pure_prior_data():
    m = LinearGaussianModel(np.zeros((3, 2)), [1.0, -2.0], [[1.0, 0.3], [0.3, 2.0]], np.eye(3))
    batch = simulate_linear_gaussian(m, 20_000, seed=2)
    h = train_mean(batch, CFG, SMALL)
    test = simulate_linear_gaussian(m, 500, seed=3)
    means = mean_head(h, test.x)
    err = np.abs(means - m.prior_mean) / m.prior_std
    assert err.max() < 0.05


def test_zero_noise_variance_collapses():
    m = LinearGaussianModel(np.eye(2), [0.0, 0.0], np.eye(2), np.zeros((2, 2)))
    batch = simulate_linear_gaussian(m, 10_000, seed=4)
    h = fit_hierarchy(batch, (), CFG, hidden=SMALL)
    _, var, _ = predict(h, simulate_linear_gaussian(m, 200, seed=5).x)
    assert np.all(var >= EPS_VAR)
    # prior variance is 1; the point-mass posterior drives G towards the floor
    assert np.median(var) < 1e-3


def test_independent_posterior_cov_near_zero():
    m = LinearGaussianModel(np.eye(3), np.zeros(3), np.diag([1.0, 2.0, 0.5]), np.diag([1.0, 0.5, 2.0]))
    batch = simulate_linear_gaussian(m, 20_000, seed=6)
    h = fit_hierarchy(batch, [(0, 1), (0, 2), (1, 2)], CFG, hidden=SMALL)
    g = conjugate_posterior(m, np.zeros(3))
    sd = g.std
    _, _, covs = predict(h, simulate_linear_gaussian(m, 500, seed=7).x)
    # aggregated over held-out observations by the median, as in the d=16 comparison
    for (a, b), c in covs.items():
        assert np.median(np.abs(c)) < 0.05 * sd[a] * sd[b]


def test_two_d_cross_covariance():
    m = LinearGaussianModel(np.eye(2), np.zeros(2), [[2.0, 1.0], [1.0, 2.0]], np.eye(2))
    batch = simulate_linear_gaussian(m, 20_000, seed=8)
    h = fit_hierarchy(batch, [(0, 1)], CFG, hidden=SMALL)
    _, _, covs = predict(h, simulate_linear_gaussian(m, 500, seed=9).x)
    assert np.median(np.abs(covs[(0, 1)] / 0.125 - 1)) < 0.2


def test_calibration_coverage():
    m = LinearGaussianModel.default(4)
    batch = simulate_linear_gaussian(m, 10_000, seed=10)
    h = fit_hierarchy(batch, (), CFG, hidden=SMALL)
    test = simulate_linear_gaussian(m, 1000, seed=11)
    means, var, _ = predict(h, test.x)
    inside = np.abs(test.theta - means) <= np.sqrt(var)
    assert 0.60 <= inside.mean() <= 0.76


@pytest.fixture(scope="module")
def small_hier():
    m = LinearGaussianModel.default(4)
    batch = simulate_linear_gaussian(m, 3000, seed=12)
    cfg = TrainConfig(max_epochs=5, batch_size=64, seed=3)
    return m, batch, fit_hierarchy(batch, [(0, 1), (1, 3)], cfg, hidden=(8,))


def test_estimate_is_deterministic(small_hier):
    m, batch, h = small_hier
    x = batch.x[0]
    a, b = estimate(h, x), estimate(h, x)
    assert np.array_equal(a.means, b.means) and a.pair_covs == b.pair_covs
    with pytest.raises(ValueError):
        estimate(h, np.zeros(5))


def test_training_is_deterministic(small_hier):
    _, batch, h = small_hier
    again = fit_hierarchy(batch, [(0, 1), (1, 3)], TrainConfig(max_epochs=5, batch_size=64, seed=3), hidden=(8,))
    xs = batch.x[:50]
    for u, v in zip(predict(h, xs)[:2], predict(again, xs)[:2]):
        assert np.array_equal(u, v)


def test_floor_and_clamp_invariants(small_hier):
    _, batch, h = small_hier
    h2 = load_hierarchy_copy(h)
    # push the variance head far below the floor and the covariance head far outside the bound
    h2.var_net.biases[-1][:] = -200.0
    net, _ = h2.cov_nets[(0, 1)]
    net.biases[-1][:] = 1e6
    _, var, covs = predict(h2, batch.x[:100])
    assert np.all(var >= EPS_VAR)
    for (a, b), c in covs.items():
        assert np.all(np.abs(c) <= COV_CLAMP * np.sqrt(var[:, a] * var[:, b]) * (1 + 1e-12))


def load_hierarchy_copy(h):
    with tempfile.TemporaryDirectory() as d:
        save_hierarchy(h, d)
        return load_hierarchy(d)


def test_checkpoint_round_trip(small_hier, tmp_path):
    _, batch, h = small_hier
    save_hierarchy(h, tmp_path / "h")
    back = load_hierarchy(tmp_path / "h")
    assert back.pairs == h.pairs
    assert back.trained_on == h.trained_on
    for u, v in zip(predict(h, batch.x[:20]), predict(back, batch.x[:20])):
        if isinstance(u, dict):
            assert all(np.array_equal(u[k], v[k]) for k in u)
        else:
            assert np.array_equal(u, v)
    with pytest.raises(FileNotFoundError):
        load_hierarchy(tmp_path / "missing")


def test_per_pair_layout_round_trip(small_hier, tmp_path):
    _, batch, h = small_hier
    cfg = TrainConfig(max_epochs=2, batch_size=64)
    cov = train_cov(batch, h, [(0, 2), (2, 3)], cfg, hidden=(8,), layout="per_pair", threads=2)
    assert {p for p in cov} == {(0, 2), (2, 3)}
    h2 = load_hierarchy_copy(h)
    h2.cov_nets = cov
    save_hierarchy(h2, tmp_path / "pp")
    assert (tmp_path / "pp" / "cov_0_2.ckpt").exists()
    assert load_hierarchy(tmp_path / "pp").pairs == [(0, 2), (2, 3)]


def test_pair_validation(small_hier):
    _, batch, h = small_hier
    with pytest.raises(IndexError):
        train_cov(batch, h, [(0, 9)])
    with pytest.raises(ConfigError):
        train_cov(batch, h, [(1, 1)])
    with pytest.raises(ConfigError):
        train_cov(batch, h, [(0, 1)], layout="diagonal")


def test_moment_estimates_accessors():
    est = MomentEstimates([1.0, 2.0, 3.0], [4.0, 9.0, 1.0], {(0, 2): 0.5})
    assert est.std == pytest.approx([2.0, 3.0, 1.0])
    assert est.cov(2, 0) == 0.5
    mean, cov = est.pair_gaussian(0, 2)
    assert np.array_equal(mean, [1.0, 3.0])
    assert np.array_equal(cov, [[4.0, 0.5], [0.5, 1.0]])
    assert MomentEstimates.from_dict(est.to_dict()).pair_covs == est.pair_covs


def test_nuisance_extension_leaves_target_pair_unchanged():
    """Extra prior-sampled parameters feeding their own data channels are marginalized by ignoring them."""
    base = LinearGaussianModel(np.eye(2), np.zeros(2), [[1.0, 0.5], [0.5, 1.0]], 0.5 * np.eye(2))
    a = np.eye(4)
    p = np.eye(4)
    p[:2, :2] = base.prior_cov
    ext = LinearGaussianModel(a, np.zeros(4), p, 0.5 * np.eye(4))
    hb = fit_hierarchy(simulate_linear_gaussian(base, 10_000, seed=13), [(0, 1)], CFG, hidden=SMALL)
    he = fit_hierarchy(simulate_linear_gaussian(ext, 10_000, seed=13), [(0, 1)], CFG, hidden=SMALL)
    test = simulate_linear_gaussian(ext, 500, seed=14)
    mb, vb, cb = predict(hb, test.x[:, :2])
    me, ve, ce = predict(he, test.x)
    # same tolerances as the d=16 oracle comparison: RMSE in prior-sigma, median sigma ratio
    rms = np.sqrt(np.mean(((me[:, :2] - mb) / base.prior_std) ** 2, axis=0))
    assert np.all(rms < 0.15)
    assert np.median(np.abs(np.sqrt(ve[:, :2] / vb) - 1)) < 0.10
    truth = conjugate_posterior(ext, test.x[0]).cov[0, 1]
    assert np.median(np.abs(ce[(0, 1)] - truth)) < 0.2 * abs(truth)


@pytest.mark.slow
def test_rmse_non_increasing_with_data():
    """Paired over seeds: doubling the training set does not worsen held-out mean RMSE."""
    m = LinearGaussianModel.default(16)
    test = simulate_linear_gaussian(m, 1000, seed=500)
    truth = posterior_means(m, test.x)
    cov, _, _ = posterior_precision_terms(m)
    cfg = TrainConfig(patience=10)
    rmse = np.empty((5, 3))
    for s in range(5):
        full = simulate_linear_gaussian(m, 20_000, seed=600 + s)
        for k, n in enumerate((5000, 10_000, 20_000)):
            h = train_mean(full.subset(np.arange(n)), cfg, seed=s)
            pred = mean_head(h, test.x)
            rmse[s, k] = np.sqrt(np.mean(((pred - truth) / m.prior_std) ** 2))
    mean = rmse.mean(axis=0)
    se = rmse.std(axis=0, ddof=1) / np.sqrt(5)
    assert mean[1] <= mean[0] + 2 * se[0]
    assert mean[2] <= mean[1] + 2 * se[1]


def test_cross_fitted_residuals_track_held_out_error():
    """In-sample residuals of an overfit mean head understate its error on new data; cross-fitted ones do not."""
    m = LinearGaussianModel.default(8)
    batch = simulate_linear_gaussian(m, 400, seed=20)
    cfg = CFG
    h = train_mean(batch, cfg, SMALL)
    test = simulate_linear_gaussian(m, 2000, seed=21)
    held_out = np.mean((h.theta_scale.apply(test.theta) - forward(h.mean_net, h.x_scale.apply(test.x))) ** 2)
    in_sample = np.mean(h.residuals(batch) ** 2)
    crossed = cross_fit_residuals(batch, h, 5, cfg, SMALL)
    assert crossed.shape == batch.theta.shape
    assert in_sample < 0.92 * held_out
    assert abs(np.mean(crossed**2) / held_out - 1) < 0.05
    assert np.array_equal(crossed, cross_fit_residuals(batch, h, 5, cfg, SMALL))
    with pytest.raises(ConfigError):
        cross_fit_residuals(batch, h, 1, cfg, SMALL)
