import numpy as np
import pytest
from scipy import stats

from marginfer.analytic_oracle import GaussianDensity, conjugate_posterior, marginalize, posterior_precision_terms
from marginfer.errors import ConfigError, FormatError
from marginfer.marginal_flow import (
    FlowEnsemble,
    FlowModel,
    _log_prob_std,
    _flow_sample,
    _nll_and_grads,
    flow_moments,
    grid_density,
    grid_mass,
    load_ensemble,
    log_prob,
    monte_carlo_kl,
    read_grid_csv,
    sample,
    save_ensemble,
    train_flow,
    write_grid_csv,
)
from marginfer.nn_core import TrainConfig
from marginfer.sim_models import LinearGaussianModel, simulate_linear_gaussian


def random_flow(dim_x=3, n_layers=3, hidden=(6,), seed=0, scale=0.3):
    """Flow with every parameter random, so no stage is the identity."""
    flow = FlowModel.create((0, 1), dim_x, n_layers=n_layers, hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed)
    return flow.with_params([rng.normal(scale=scale, size=p.shape) for p in flow.params()])


def test_zero_flow_at_origin():
    flow = FlowModel.zeros(4)
    for x in (np.zeros(4), np.array([3.0, -1.0, 0.2, 9.0])):
        assert log_prob(flow, np.zeros(2), x) == pytest.approx(-np.log(2 * np.pi), abs=1e-12)
    assert -np.log(2 * np.pi) == pytest.approx(-1.837877, abs=1e-6)


@pytest.mark.parametrize("half, res", [(6.0, 200), (5.0, 200)])
def test_zero_flow_grid_mass(half, res):
    a, b, d = grid_density(FlowModel.zeros(2), np.zeros(2), ((-half, half), (-half, half)), res)
    assert grid_mass(a, b, d) == pytest.approx(1.0, abs=1e-3)


def test_zero_flow_samples():
    s = sample(FlowModel.zeros(3), np.ones(3), 100_000, seed=1)
    assert np.all(np.abs(s.mean(axis=0)) < 0.02)
    assert np.all(np.abs(np.cov(s, rowvar=False) - np.eye(2)) < 0.02)


def test_log_density_ks_against_direct_samples():
    """A single constant affine stage is an exact Gaussian; compare log-density distributions."""
    flow = FlowModel.zeros(2, n_layers=2)
    first, _ = flow.stages[0]
    first.biases[-1][:] = [0.7, np.log(1.5)]
    second = flow.stages[0][1]
    second.biases[-1][:] = [-0.4, np.log(0.5)]
    ref = GaussianDensity([0.7, -0.4], np.diag([1.5**2, 0.5**2]))
    x = np.zeros(2)
    s = sample(flow, x, 20_000, seed=2)
    lq = log_prob(flow, s, x)
    direct = ref.log_prob(ref.sample(20_000, np.random.default_rng(3)))
    assert stats.ks_2samp(lq, direct).pvalue > 0.01
    assert np.allclose(lq, ref.log_prob(s), atol=1e-12)


def _forward_map(flow, z, xs):
    _, u, _ = _log_prob_std(flow, z, xs, keep=True)
    return u


def test_change_of_variables_matches_fd_jacobian():
    flow = random_flow(seed=4)
    rng = np.random.default_rng(5)
    h = 1e-6
    for _ in range(20):
        z = rng.normal(size=(1, 2))
        xs = rng.normal(size=(1, 3))
        jac = np.empty((2, 2))
        for c in range(2):
            dz = np.zeros((1, 2))
            dz[0, c] = h
            jac[:, c] = (_forward_map(flow, z + dz, xs) - _forward_map(flow, z - dz, xs))[0] / (2 * h)
        u = _forward_map(flow, z, xs)[0]
        expected = -0.5 * u @ u - np.log(2 * np.pi) + np.log(abs(np.linalg.det(jac)))
        got = _log_prob_std(flow, z, xs)[0]
        assert abs(got - expected) / abs(expected) < 1e-4


def test_sampling_inverts_density_map():
    flow = random_flow(seed=6)
    rng = np.random.default_rng(7)
    u = rng.normal(size=(50, 2))
    xs = rng.normal(size=(50, 3))
    z = _flow_sample(flow, xs, u)
    assert np.allclose(_forward_map(flow, z, xs), u, atol=1e-10)


def test_nll_gradient_matches_finite_differences():
    flow = random_flow(dim_x=2, n_layers=2, hidden=(4,), seed=8)
    rng = np.random.default_rng(9)
    z = rng.normal(size=(6, 2))
    xs = rng.normal(size=(6, 2))
    _, grads = _nll_and_grads(flow, z, xs)
    params = flow.params()
    h = 1e-6
    worst = 0.0
    for p_idx, p in enumerate(params):
        for k in range(p.size):
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[p_idx].flat[k] += h
            dn[p_idx].flat[k] -= h
            num = (_nll_and_grads(flow.with_params(up), z, xs)[0]
                   - _nll_and_grads(flow.with_params(dn), z, xs)[0]) / (2 * h)
            ana = grads[p_idx].flat[k]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    assert worst < 1e-4


def test_log_prob_input_errors():
    flow = FlowModel.zeros(2)
    with pytest.raises(ValueError):
        log_prob(flow, [np.nan, 0.0], np.zeros(2))
    with pytest.raises(ValueError):
        log_prob(flow, [0.0, 0.0], np.zeros(3))
    with pytest.raises(ValueError):
        grid_density(flow, np.zeros(2), ((1.0, -1.0), (-1.0, 1.0)), 10)
    with pytest.raises(ValueError):
        sample(flow, np.zeros(3), 5)


def test_ensemble_validation():
    with pytest.raises(ConfigError):
        FlowEnsemble([])
    with pytest.raises(ConfigError):
        FlowEnsemble([FlowModel.zeros(2, pair=(0, 1)), FlowModel.zeros(2, pair=(0, 2))])


def test_rejects_repeated_parameter():
    batch = simulate_linear_gaussian(LinearGaussianModel.default(3), 50, seed=0)
    with pytest.raises(ConfigError):
        train_flow((1, 1), batch, TrainConfig(max_epochs=1))
    with pytest.raises(IndexError):
        train_flow((0, 3), batch, TrainConfig(max_epochs=1))


def test_uninformative_data_recovers_prior_marginal():
    m = LinearGaussianModel(np.zeros((3, 3)), [0.5, -1.0, 0.0], [[1.0, 0.6, 0.0], [0.6, 2.0, 0.3], [0.0, 0.3, 1.0]],
                            np.eye(3))
    batch = simulate_linear_gaussian(m, 10_000, seed=1)
    ens, _ = train_flow((0, 1), batch, TrainConfig(patience=10), n_members=1, hidden=(16, 16))
    prior = marginalize(GaussianDensity(m.prior_mean, m.prior_cov), [0, 1])
    for x in simulate_linear_gaussian(m, 5, seed=2).x:
        assert monte_carlo_kl(prior, ens, x, seed=3) < 0.1


def test_exchangeable_model_gives_symmetric_grid():
    m = LinearGaussianModel(np.eye(2), np.zeros(2), [[1.0, 0.5], [0.5, 1.0]], 0.5 * np.eye(2))
    batch = simulate_linear_gaussian(m, 10_000, seed=4)
    ens, _ = train_flow((0, 1), batch, TrainConfig(patience=10), n_members=1, hidden=(16, 16))
    a, b, d = grid_density(ens, np.array([0.4, 0.4]), ((-3, 3), (-3, 3)), 60)
    cell = (a[1] - a[0]) * (b[1] - b[0])
    # total-variation distance between the grid and its transpose
    tv = 0.5 * np.abs(d - d.T).sum() * cell
    assert tv < 0.05


def test_checkpoint_and_csv_round_trip(tmp_path):
    ens = FlowEnsemble([random_flow(seed=10), random_flow(seed=11)])
    save_ensemble(ens, tmp_path / "f")
    back = load_ensemble(tmp_path / "f")
    pts = np.random.default_rng(0).normal(size=(30, 2))
    x = np.array([0.1, 0.2, 0.3])
    assert np.array_equal(log_prob(ens, pts, x), log_prob(back, pts, x))
    a, b, d = grid_density(back, x, ((-2, 2), (-1, 3)), (5, 7))
    write_grid_csv(tmp_path / "g.csv", a, b, d)
    assert (tmp_path / "g.csv").read_text().splitlines()[0] == "alpha,beta,density"
    a2, b2, d2 = read_grid_csv(tmp_path / "g.csv")
    assert np.array_equal(a, a2) and np.array_equal(b, b2) and np.array_equal(d, d2)
    (tmp_path / "f" / "manifest.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_ensemble(tmp_path / "f")


# ---------------------------------------------------------------------------
# trained on the d=16 default model
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained16():
    m = LinearGaussianModel.default(16)
    batch = simulate_linear_gaussian(m, 20_000, seed=1)
    ens, _ = train_flow((0, 1), batch, TrainConfig(patience=10))
    return m, ens


def _analytic_pair(m, x, pair=(0, 1)):
    return marginalize(conjugate_posterior(m, x), list(pair))


@pytest.mark.slow
def test_trained_flow_kl(trained16):
    m, ens = trained16
    test = simulate_linear_gaussian(m, 10_000, seed=99)
    cov, gain, offset = posterior_precision_terms(m)
    g = GaussianDensity(np.zeros(2), cov[:2, :2])
    rng = np.random.default_rng(5)
    mu = (test.x @ gain.T + offset)[:, :2]
    s = mu + g.sample(10_000, rng)
    # one analytic draw per held-out observation: the expected KL over the data
    kl = np.mean(g.log_prob(s - mu) - log_prob(ens, s, test.x))
    assert kl < 0.1


@pytest.mark.slow
def test_trained_flow_sample_covariance(trained16):
    m, ens = trained16
    rel = []
    for k, x in enumerate(simulate_linear_gaussian(m, 20, seed=7).x):
        g = _analytic_pair(m, x)
        s = sample(ens, x, 100_000, seed=k)
        rel.append(np.abs(np.cov(s, rowvar=False) / g.cov - 1))
    # each entry, median over held-out observations (as in the d=16 moment comparison)
    assert np.all(np.median(rel, axis=0) < 0.1)


@pytest.mark.slow
def test_trained_flow_grid(trained16):
    m, ens = trained16
    for x in simulate_linear_gaussian(m, 3, seed=7).x:
        g = _analytic_pair(m, x)
        bounds = tuple((mu - 6 * sd, mu + 6 * sd) for mu, sd in zip(g.mean, g.std))
        a, b, d = grid_density(ens, x, bounds, 200)
        assert 0.99 <= grid_mass(a, b, d) <= 1.001
        ia, ib = np.unravel_index(np.argmax(d), d.shape)
        assert np.all(np.abs(np.array([a[ia], b[ib]]) - g.mean) < 0.5 * g.std)
        mom = flow_moments(ens, x, seed=9)
        assert np.all(np.abs(mom.means - g.mean) < 0.2 * g.std)


@pytest.mark.slow
def test_ensemble_not_worse_than_median_member(trained16):
    m, ens = trained16
    test = simulate_linear_gaussian(m, 5000, seed=11)
    ab = test.theta[:, :2]
    avg = np.mean(log_prob(ens, ab, test.x))
    members = [np.mean(log_prob(f, ab, test.x)) for f in ens.members]
    assert avg >= np.median(members)


@pytest.mark.slow
def test_average_log_density_close_to_analytic(trained16):
    m, ens = trained16
    test = simulate_linear_gaussian(m, 5000, seed=12)
    cov, gain, offset = posterior_precision_terms(m)
    mu = (test.x @ gain.T + offset)[:, :2]
    g = GaussianDensity(np.zeros(2), cov[:2, :2])
    analytic = np.mean(g.log_prob(test.theta[:, :2] - mu))
    assert abs(np.mean(log_prob(ens, test.theta[:, :2], test.x)) - analytic) < 0.1
