"""Command-line pipeline: simulate, train, mcmc, corner, crossval, report.

All artifacts live under one run directory (``--out``)::

    train.bin, test.bin          simulated datasets
    moments/                     moment-network hierarchy (+ loss_history.csv)
    flow/pair_A_B/               flow ensemble per pair (+ loss_history.csv)
    mcmc/chain.bin, summary.json reference chain
    corner/                      pair and diagonal files for external plotting
    crossval/report.json         pass/fail flags with measured values

Every command prints the resolved configuration it runs with. Exit codes:
0 success, 2 configuration or usage error, 3 failed validation, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analytic_oracle import conjugate_posterior, marginalize, posterior_precision_terms
from .errors import ConfigError, DiagnosticError, MarginferError, ValidationFailure
from .marginal_flow import (
    flow_moments,
    grid_density,
    grid_mass,
    load_ensemble,
    log_prob,
    save_ensemble,
    train_flow,
    write_grid_csv,
)
from .mcmc_ref import (
    McmcConfig,
    chain_marginal_moments,
    effective_sample_size,
    integrated_time,
    linear_gaussian_log_post,
    run_chain,
    save_chain,
    suggest_burn_in,
)
from .moment_net import fit_hierarchy, load_hierarchy, predict, save_hierarchy
from .nn_core import TrainConfig, load_train_state, save_train_state
from .sim_models import LinearGaussianModel, model_from_config, read_batch, simulate, write_batch

log = logging.getLogger("marginfer")

REPORT_SCHEMA = "marginfer.report"
REPORT_VERSION = 1
MANY_PAIRS = 120

# tolerances evaluated by crossval
TOL = {
    "mean_rmse_prior_sigma": 0.15,
    "sigma_rel_median": 0.10,
    "cov_rel": 0.20,
    "cov_eligible_rho": 0.1,
    "kl_nats": 0.1,
    "grid_mass": (0.99, 1.001),
    "coverage": (0.60, 0.76),
    "xval_sigma": 0.15,
    "xval_mean": 0.2,
    "mcmc_mean_se": 3.0,
    "mcmc_cov_rel": 0.05,
}

DEFAULTS = {
    "model": {"kind": "linear_gaussian", "dim_theta": 16},
    "n_sims": 20_000,
    "n_test": 1000,
    "seed": 0,
    "pairs": [[0, 1]],
    "moments": {"hidden": [128, 128], "layout": "joint", "residual_folds": 1},
    "flow": {"hidden": [64, 64], "n_layers": 5, "n_members": 3, "patience": 10},
    "mcmc": {"steps": 25_000, "walkers": None, "stretch_a": 2.0},
    "corner": {"resolution": 100, "width_sigma": 6.0},
    "crossval": {"n_obs": 20, "flow_samples": 10_000, "kl_samples": 10_000},
}

TRAIN_KEYS = ("learning_rate", "batch_size", "max_epochs", "patience", "validation_fraction")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_pairs(spec, dim):
    """``"a,b;c,d"``, ``"all"`` or a list of 2-lists -> sorted list of pairs."""
    if spec == "all":
        return [(a, b) for a in range(dim) for b in range(a + 1, dim)]
    if isinstance(spec, str):
        items = [s for s in spec.replace(" ", "").split(";") if s]
        try:
            spec = [[int(v) for v in item.split(",")] for item in items]
        except ValueError:
            raise ConfigError(f"cannot parse pair list {spec!r}; expected 'a,b;c,d' or 'all'") from None
    pairs = []
    for item in spec:
        if len(item) != 2:
            raise ConfigError(f"pair entry {item!r} must have exactly two indices")
        a, b = int(item[0]), int(item[1])
        if a == b:
            raise ConfigError(f"pair ({a}, {b}) repeats a parameter")
        if not (0 <= a < dim and 0 <= b < dim):
            raise ConfigError(f"pair ({a}, {b}) out of range for {dim} parameters")
        pairs.append((min(a, b), max(a, b)))
    if len(set(pairs)) != len(pairs):
        raise ConfigError("pair list contains duplicates")
    return sorted(pairs)


def resolve_config(args):
    """Config file merged over defaults, then command-line overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    base_dir = Path(".")
    if args.config:
        path = Path(args.config)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = set(user) - set(DEFAULTS) - {"out"}
        if unknown:
            raise ConfigError(f"{path}: unknown field(s) {sorted(unknown)}")
        if "model" in user:
            cfg["model"] = {}
        cfg = _merge(cfg, user)
        base_dir = path.parent
    if isinstance(cfg["model"], str):
        mpath = base_dir / cfg["model"]
        try:
            cfg["model"] = json.loads(mpath.read_text())
        except FileNotFoundError:
            raise ConfigError(f"model config not found: {mpath}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{mpath}: invalid JSON at line {exc.lineno} column {exc.colno}") from None
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "pairs", None) is not None:
        cfg["pairs"] = args.pairs
    if getattr(args, "mcmc_steps", None) is not None:
        cfg["mcmc"]["steps"] = args.mcmc_steps
    if getattr(args, "mcmc_walkers", None) is not None:
        cfg["mcmc"]["walkers"] = args.mcmc_walkers
    cfg["out"] = str(args.out or cfg.get("out") or "run")
    cfg["threads"] = args.threads
    for key in ("n_sims", "n_test", "seed"):
        if not isinstance(cfg[key], int) or cfg[key] < 0:
            raise ConfigError(f"{key} must be a non-negative integer, got {cfg[key]!r}")
    return cfg


def _model(cfg):
    return model_from_config(cfg["model"])


def _pairs(cfg, dim, allow_many=False):
    pairs = parse_pairs(cfg["pairs"], dim)
    if cfg["pairs"] == "all":
        log.warning("all-pairs selects %d pairs for %d parameters", len(pairs), dim)
        if len(pairs) > MANY_PAIRS and not allow_many:
            raise ConfigError(f"all-pairs would train {len(pairs)} pairs; pass --allow-many-pairs to confirm")
    return pairs


def _train_config(section, seed):
    kw = {k: section[k] for k in TRAIN_KEYS if k in section}
    return TrainConfig(seed=seed, **kw)


def _print_config(command, cfg):
    print(f"marginfer {__version__} {command}: resolved config")
    print(json.dumps(cfg, indent=1, sort_keys=True, default=str))


def _out(cfg):
    d = Path(cfg["out"])
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {d} is not writable: {exc}") from None
    return d


def _load_dataset(path, what):
    if not Path(path).exists():
        raise ConfigError(f"{what} dataset not found: {path} (run 'marginfer simulate' first)")
    return read_batch(path)


def _check_dims(batch, model):
    if batch.dim_theta != model.dim_theta or batch.dim_x != model.dim_x:
        raise ConfigError(
            f"dataset has dim_theta={batch.dim_theta}, dim_x={batch.dim_x}; "
            f"model expects dim_theta={model.dim_theta}, dim_x={model.dim_x}")


def _load_obs(cfg, args, model):
    """Observation from ``--obs`` (JSON array or whitespace text) or a test-set row."""
    if getattr(args, "obs", None):
        path = Path(args.obs)
        if not path.exists():
            raise ConfigError(f"observation file not found: {path}")
        text = path.read_text().strip()
        try:
            x = np.asarray(json.loads(text), dtype=float)
        except json.JSONDecodeError:
            x = np.loadtxt(path, dtype=float, ndmin=1)
    else:
        test = Path(cfg["out"]) / "test.bin"
        if test.exists():
            batch = read_batch(test)
            if batch.n_sims > args.obs_index:
                return batch.x[args.obs_index].copy()
        x = simulate(model, 1, cfg["seed"] + 2).x[0]
    x = np.ravel(x)
    if x.shape != (model.dim_x,):
        raise ConfigError(f"observation has {x.size} values, model expects {model.dim_x}")
    return x


def _fingerprint_line(name, batch):
    return (f"{name}: rows={batch.n_sims} dim_theta={batch.dim_theta} dim_x={batch.dim_x} "
            f"seed={batch.seed} sha256={batch.fingerprint()}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(cfg, args):
    model = _model(cfg)
    out = _out(cfg)
    if cfg["n_sims"] == 0:
        log.warning("n_sims = 0: writing an empty dataset")
    t0 = time.perf_counter()
    train = simulate(model, cfg["n_sims"], cfg["seed"])
    write_batch(train, out / "train.bin")
    print(_fingerprint_line("train.bin", train))
    if cfg["n_test"]:
        test = simulate(model, cfg["n_test"], cfg["seed"] + 1)
        write_batch(test, out / "test.bin")
        print(_fingerprint_line("test.bin", test))
    (out / "config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    log.info("simulated in %.2fs", time.perf_counter() - t0)
    return 0


def _state_dir(d):
    s = d / "states"
    s.mkdir(parents=True, exist_ok=True)
    return s


def _load_states(d):
    s = d / "states"
    if not s.is_dir():
        return {}
    return {p.stem: load_train_state(p) for p in sorted(s.glob("*.state"))}


def _save_states(d, states):
    s = _state_dir(d)
    for old in s.glob("*.state"):
        old.unlink()
    for key, st in states.items():
        save_train_state(st, s / f"{key}.state")


def _write_history(path, histories, label):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label, "epoch", "train_loss", "val_loss"])
        for name, hist in histories.items():
            for h in hist:
                w.writerow([name, h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])])


def cmd_train(cfg, args):
    model = _model(cfg)
    out = _out(cfg)
    batch = _load_dataset(Path(args.data) if args.data else out / "train.bin", "training")
    _check_dims(batch, model)
    if batch.n_sims < 2:
        raise ConfigError(f"training needs at least 2 simulations, dataset has {batch.n_sims}")
    pairs = _pairs(cfg, batch.dim_theta, args.allow_many_pairs)
    t0 = time.perf_counter()
    if args.method == "moments":
        sec = cfg["moments"]
        d = out / "moments"
        d.mkdir(parents=True, exist_ok=True)
        states = _load_states(d) if args.resume else {}
        if args.resume and not states:
            log.warning("--resume: no saved training state in %s, starting fresh", d)
        tcfg = _train_config(sec, cfg["seed"])
        hier = fit_hierarchy(batch, pairs, tcfg, hidden=tuple(sec["hidden"]), layout=sec["layout"],
                             threads=cfg["threads"], states=states,
                             residual_folds=int(sec["residual_folds"]))
        save_hierarchy(hier, d, extra={"train_config": asdict(tcfg), "hidden": list(sec["hidden"])})
        _save_states(d, states)
        _write_history(d / "loss_history.csv", hier.histories, "head")
        print(f"moments: trained mean, variance and {len(hier.pairs)} covariance head(s) -> {d}")
    else:
        sec = cfg["flow"]
        if not pairs:
            raise ConfigError("flow training needs at least one pair")
        tcfg = _train_config(sec, cfg["seed"])
        for pair in pairs:
            d = out / "flow" / f"pair_{pair[0]}_{pair[1]}"
            d.mkdir(parents=True, exist_ok=True)
            loaded = _load_states(d) if args.resume else {}
            states = {int(k.split("_")[1]): v for k, v in loaded.items()}
            ens, hists = train_flow(pair, batch, tcfg, int(sec["n_members"]), int(sec["n_layers"]),
                                    tuple(sec["hidden"]), cfg["threads"], states)
            save_ensemble(ens, d, extra={"train_config": asdict(tcfg), "trained_on": batch.fingerprint()})
            _save_states(d, {f"member_{m}": st for m, st in states.items()})
            _write_history(d / "loss_history.csv", {str(m): h for m, h in enumerate(hists)}, "member")
            print(f"flow: pair {pair} ensemble of {len(ens.members)} -> {d}")
    print(f"training time: {time.perf_counter() - t0:.1f}s")
    return 0


def _default_walkers(d):
    return max(8 * d, 32)


def run_mcmc(model, x_obs, mcfg, seed):
    """Chain on the analytic posterior plus its summary dict."""
    d = model.dim_theta
    walkers = int(mcfg.get("walkers") or _default_walkers(d))
    steps = int(mcfg["steps"])
    if walkers % 2 or walkers < 2 * d:
        raise ConfigError(f"mcmc walkers must be even and >= {2 * d}, got {walkers}")
    # walkers start at prior draws: in the support, and burn-in removes the transient
    init = model.prior_mean + np.random.default_rng([seed, 17]).standard_normal((walkers, d)) @ \
        np.linalg.cholesky(model.prior_cov).T
    chain = run_chain(linear_gaussian_log_post(model, x_obs), init, steps,
                      McmcConfig(stretch_a=float(mcfg.get("stretch_a", 2.0)), seed=seed, vectorized=True))
    burn = suggest_burn_in(chain)
    if burn >= steps:
        raise DiagnosticError(f"suggested burn-in {burn} exceeds the {steps} steps run; increase --mcmc-steps")
    mom = chain_marginal_moments(chain, burn_in=burn)
    tau = [integrated_time(chain.samples[burn:, :, p]) for p in range(d)]
    ess = [effective_sample_size(chain, p, burn) for p in range(d)]
    flat_cov = np.cov(chain.samples[burn:].reshape(-1, d), rowvar=False)
    summary = {
        "x_obs": x_obs.tolist(),
        "n_steps": steps,
        "n_walkers": walkers,
        "burn_in": burn,
        "n_post": (steps - burn) * walkers,
        "acceptance_rate": chain.acceptance_rate,
        "means": mom.means.tolist(),
        "cov": np.atleast_2d(flat_cov).tolist(),
        "tau_int": tau,
        "ess": ess,
        "seed": seed,
    }
    return chain, summary


def cmd_mcmc(cfg, args):
    model = _model(cfg)
    if not isinstance(model, LinearGaussianModel):
        raise ConfigError("mcmc needs a model with an explicit likelihood (linear_gaussian)")
    out = _out(cfg)
    x_obs = _load_obs(cfg, args, model)
    t0 = time.perf_counter()
    chain, summary = run_mcmc(model, x_obs, cfg["mcmc"], cfg["seed"])
    summary["runtime_s"] = time.perf_counter() - t0
    d = out / "mcmc"
    d.mkdir(parents=True, exist_ok=True)
    save_chain(chain, d / "chain.bin")
    (d / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"mcmc: {summary['n_post']} post-burn-in samples, acceptance {summary['acceptance_rate']:.3f}, "
          f"burn-in {summary['burn_in']} steps")
    print(f"ESS per parameter: min {min(summary['ess']):.0f}, max {max(summary['ess']):.0f}")
    return 0


def _trained(out):
    hier = load_hierarchy(out / "moments") if (out / "moments" / "manifest.json").exists() else None
    flows = {}
    for d in sorted((out / "flow").glob("pair_*")) if (out / "flow").is_dir() else []:
        if (d / "manifest.json").exists():
            ens = load_ensemble(d)
            flows[ens.pair] = ens
    return hier, flows


def _describe(hier, flows):
    mn = f"moments (covariance pairs {hier.pairs})" if hier else "no moment network"
    fl = f"flows for pairs {sorted(flows)}" if flows else "no flows"
    return f"{mn}; {fl}"


def cmd_corner(cfg, args):
    model = _model(cfg)
    out = _out(cfg)
    hier, flows = _trained(out)
    if hier is None and not flows:
        raise ConfigError(f"nothing trained under {out}; run 'marginfer train' first")
    dim = model.dim_theta
    pairs = _pairs(cfg, dim, args.allow_many_pairs)
    res = int(args.resolution if args.resolution is not None else cfg["corner"]["resolution"])
    if res < 2:
        raise ConfigError(f"grid resolution must be at least 2, got {res}")
    width = float(cfg["corner"]["width_sigma"])
    for pair in pairs:
        if pair not in flows and (hier is None or pair not in hier.pairs):
            raise ConfigError(f"no estimator trained for pair {pair}; trained: {_describe(hier, flows)}")
    x_obs = _load_obs(cfg, args, model)
    d = out / "corner"
    d.mkdir(parents=True, exist_ok=True)
    est = None
    if hier is not None:
        means, var, covs = predict(hier, x_obs[None, :])
        est = (means[0], var[0], {p: float(c[0]) for p, c in covs.items()})
    files = []
    spd = {}
    marginals = {}
    for pair in pairs:
        a, b = pair
        if est is not None and pair in hier.pairs:
            mean = [float(est[0][a]), float(est[0][b])]
            cov = [[float(est[1][a]), est[2][pair]], [est[2][pair], float(est[1][b])]]
            spd[f"{a},{b}"] = bool(np.linalg.eigvalsh(np.array(cov)).min() > 0)
            name = f"pair_{a}_{b}_moments.json"
            (d / name).write_text(json.dumps({"pair": [a, b], "mean": mean, "cov": cov}, indent=1))
            files.append(name)
        if pair in flows:
            if est is not None:
                centre = [est[0][a], est[0][b]]
                scale = [np.sqrt(est[1][a]), np.sqrt(est[1][b])]
            else:
                m = flow_moments(flows[pair], x_obs, seed=cfg["seed"])
                centre, scale = m.means, m.std
            bounds = tuple((c - width * s, c + width * s) for c, s in zip(centre, scale))
            alpha, beta, dens = grid_density(flows[pair], x_obs, bounds, res)
            name = f"pair_{a}_{b}_flow.csv"
            write_grid_csv(d / name, alpha, beta, dens)
            files.append(name)
            cell = (beta[1] - beta[0], alpha[1] - alpha[0])
            marginals.setdefault(a, (alpha, dens.sum(axis=1) * cell[0]))
            marginals.setdefault(b, (beta, dens.sum(axis=0) * cell[1]))
    params = sorted({p for pair in pairs for p in pair})
    for i in params:
        entry = {"param": i}
        if est is not None:
            entry["mean"] = float(est[0][i])
            entry["var"] = float(est[1][i])
        if i in marginals:
            grid, dens = marginals[i]
            entry["flow_marginal"] = {"grid": grid.tolist(), "density": dens.tolist()}
        name = f"diag_{i}.json"
        (d / name).write_text(json.dumps(entry))
        files.append(name)
    report = {"x_obs": x_obs.tolist(), "resolution": res, "width_sigma": width,
              "files": files, "moment_cov_spd": spd}
    (d / "corner.json").write_text(json.dumps(report, indent=1))
    print(f"corner: {len(pairs)} pair(s), {len(params)} diagonal file(s) -> {d}")
    return 0


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


def compare_pair(ref_sigma, mn_mean, mn_sigma, flow_mean, flow_sigma):
    """Cross-method deltas for one pair at one observation (in units of ``ref_sigma``)."""
    ref_sigma = np.asarray(ref_sigma, dtype=float)
    return {
        "sigma_delta": (np.abs(np.asarray(flow_sigma) - np.asarray(mn_sigma)) / ref_sigma).tolist(),
        "mean_delta": (np.abs(np.asarray(flow_mean) - np.asarray(mn_mean)) / ref_sigma).tolist(),
    }


def pair_flags(record):
    """Pass/fail flags for the measured values present in a pair record."""
    flags = {}
    if "xval_sigma_delta" in record:
        flags["xval_sigma"] = max(record["xval_sigma_delta"]) < TOL["xval_sigma"]
        flags["xval_mean"] = max(record["xval_mean_delta"]) < TOL["xval_mean"]
    if "kl" in record:
        flags["kl"] = record["kl"] < TOL["kl_nats"]
    if "grid_mass" in record:
        lo, hi = TOL["grid_mass"]
        flags["grid_mass"] = lo <= record["grid_mass"] <= hi
    if "mn_cov_rel_error" in record and record.get("cov_eligible", False):
        flags["mn_cov"] = record["mn_cov_rel_error"] < TOL["cov_rel"]
    return {k: bool(v) for k, v in flags.items()}


def global_flags(summary):
    flags = {}
    if "mn_mean_rmse" in summary:
        flags["mn_mean_rmse"] = max(summary["mn_mean_rmse"]) < TOL["mean_rmse_prior_sigma"]
        flags["mn_sigma"] = summary["mn_sigma_rel_median"] < TOL["sigma_rel_median"]
    if "coverage" in summary:
        lo, hi = TOL["coverage"]
        flags["coverage"] = lo <= summary["coverage"] <= hi
    if "mcmc_mean_z" in summary:
        flags["mcmc_means"] = max(np.abs(summary["mcmc_mean_z"])) < TOL["mcmc_mean_se"]
        flags["mcmc_cov"] = summary["mcmc_cov_rel"] < TOL["mcmc_cov_rel"]
    return {k: bool(v) for k, v in flags.items()}


def _ref_moments(model, x, pair):
    if isinstance(model, LinearGaussianModel):
        g = marginalize(conjugate_posterior(model, x), list(pair))
        return g.mean, g.std
    return None


def _mcmc_section(cfg, model, out, test):
    """Moments of a saved chain (``marginfer mcmc``) or of a fresh one at the first test row."""
    path = out / "mcmc" / "summary.json"
    if path.exists():
        summary = json.loads(path.read_text())
    else:
        _, summary = run_mcmc(model, test.x[0], cfg["mcmc"], cfg["seed"])
    g = conjugate_posterior(model, np.asarray(summary["x_obs"]))
    means = np.asarray(summary["means"])
    cov = np.asarray(summary["cov"])
    ess = np.asarray(summary["ess"])
    sd = g.std
    z = (means - g.mean) / (sd / np.sqrt(ess))
    return {
        "mcmc_mean_z": z.tolist(),
        "mcmc_cov_rel": float(np.max(np.abs(cov - g.cov) / np.outer(sd, sd))),
        "mcmc_ess_min": float(ess.min()),
        "mcmc_n_post": int(summary["n_post"]),
        "mcmc_acceptance": float(summary["acceptance_rate"]),
    }


def crossval(cfg, out):
    """Build the comparison report dict (does not write it)."""
    t0 = time.perf_counter()
    model = _model(cfg)
    hier, flows = _trained(out)
    if hier is None and not flows:
        raise ConfigError(f"crossval needs a trained estimator under {out}; run 'marginfer train' first")
    linear = isinstance(model, LinearGaussianModel)
    test_path = out / "test.bin"
    if test_path.exists():
        test = read_batch(test_path)
    elif linear:
        test = simulate(model, max(cfg["n_test"], 1), cfg["seed"] + 1)
    else:
        raise ConfigError(f"crossval needs {test_path} for a model without an analytic posterior")
    _check_dims(test, model)
    xv = cfg["crossval"]
    n_obs = min(int(xv["n_obs"]), test.n_sims)
    summary = {"n_test": test.n_sims}
    records = {}

    if hier is not None:
        means, var, covs = predict(hier, test.x)
        inside = np.abs(test.theta - means) <= np.sqrt(var)
        summary["coverage"] = float(inside.mean())
        if linear:
            cov, gain, offset = posterior_precision_terms(model)
            truth = test.x @ gain.T + offset
            sd = np.sqrt(np.diag(cov))
            summary["mn_mean_rmse"] = np.sqrt(np.mean(((means - truth) / model.prior_std) ** 2, axis=0)).tolist()
            summary["mn_sigma_rel_median"] = float(np.median(np.abs(np.sqrt(var) / sd - 1)))
            corr = cov / np.outer(sd, sd)
            for pair, c in covs.items():
                rec = records.setdefault(f"{pair[0]},{pair[1]}", {})
                rec["mn_cov_rel_error"] = float(np.median(np.abs(c - cov[pair]) / abs(cov[pair])))
                rec["analytic_rho"] = float(corr[pair])
                rec["cov_eligible"] = bool(abs(corr[pair]) > TOL["cov_eligible_rho"])

    for pair, ens in sorted(flows.items()):
        rec = records.setdefault(f"{pair[0]},{pair[1]}", {})
        a, b = pair
        if linear:
            cov, gain, offset = posterior_precision_terms(model)
            c2 = cov[np.ix_([a, b], [a, b])]
            n_kl = int(xv["kl_samples"])
            rows = np.arange(n_kl) % test.n_sims
            xs = test.x[rows]
            mu = (xs @ gain.T + offset)[:, [a, b]]
            chol = np.linalg.cholesky(c2)
            dev = np.random.default_rng([cfg["seed"], 31]).standard_normal((n_kl, 2)) @ chol.T
            lp = -0.5 * np.sum(np.linalg.solve(chol, dev.T) ** 2, axis=0) - np.log(2 * np.pi) \
                - np.log(np.diag(chol)).sum()
            rec["kl"] = float(np.mean(lp - log_prob(ens, mu + dev, xs)))
            g = marginalize(conjugate_posterior(model, test.x[0]), [a, b])
            bounds = tuple((m - 6 * s, m + 6 * s) for m, s in zip(g.mean, g.std))
            rec["grid_mass"] = grid_mass(*grid_density(ens, test.x[0], bounds, 200))
        if hier is not None:
            sig, mdel = [], []
            for k in range(n_obs):
                x = test.x[k]
                fm = flow_moments(ens, x, int(xv["flow_samples"]), seed=cfg["seed"] + k)
                mm, mv, _ = predict(hier, x[None, :])
                ref = _ref_moments(model, x, pair)
                ref_sigma = ref[1] if ref is not None else np.sqrt(mv[0, [a, b]])
                cmp = compare_pair(ref_sigma, mm[0, [a, b]], np.sqrt(mv[0, [a, b]]), fm.means, fm.std)
                sig.append(cmp["sigma_delta"])
                mdel.append(cmp["mean_delta"])
            # median over observations, one value per parameter of the pair
            rec["xval_sigma_delta"] = np.median(sig, axis=0).tolist()
            rec["xval_mean_delta"] = np.median(mdel, axis=0).tolist()

    if linear and cfg["mcmc"]["steps"]:
        summary.update(_mcmc_section(cfg, model, out, test))

    for rec in records.values():
        rec["flags"] = pair_flags(rec)
    gflags = global_flags(summary)
    passed = all(gflags.values()) and all(all(r["flags"].values()) for r in records.values())
    return {
        "schema": REPORT_SCHEMA,
        "version": REPORT_VERSION,
        "model_tag": test.model_tag,
        "tolerances": TOL,
        "trained": _describe(hier, flows),
        "pairs": records,
        "global": summary,
        "flags": gflags,
        "passed": passed,
        "runtime_s": time.perf_counter() - t0,
    }


def cmd_crossval(cfg, args):
    out = _out(cfg)
    report = crossval(cfg, out)
    d = out / "crossval"
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(json.dumps(report, indent=1))
    print(format_report(report))
    if not report["passed"]:
        raise ValidationFailure(f"crossval failed; see {d / 'report.json'}")
    return 0


def format_report(report):
    lines = [f"report v{report['version']} for {report['model_tag']}: {'PASS' if report['passed'] else 'FAIL'}",
             f"  trained: {report['trained']}"]
    g = report["global"]
    for key in ("coverage", "mn_sigma_rel_median", "mcmc_cov_rel", "mcmc_ess_min", "mcmc_acceptance"):
        if key in g:
            lines.append(f"  {key}: {g[key]:.4g}")
    if "mn_mean_rmse" in g:
        lines.append(f"  mn_mean_rmse (max over components): {max(g['mn_mean_rmse']):.4g}")
    for name, ok in sorted(report["flags"].items()):
        lines.append(f"  [{'ok' if ok else 'FAIL'}] {name}")
    for pair, rec in sorted(report["pairs"].items()):
        vals = []
        for k, v in rec.items():
            if isinstance(v, float):
                vals.append(f"{k}={v:.4g}")
            elif isinstance(v, list):
                vals.append(f"{k}=[{', '.join(f'{u:.3g}' for u in v)}]")
        flags = " ".join(f"{k}:{'ok' if ok else 'FAIL'}" for k, ok in sorted(rec["flags"].items()))
        lines.append(f"  pair {pair}: {', '.join(vals)}")
        if flags:
            lines.append(f"    {flags}")
    return "\n".join(lines)


def cmd_report(cfg, args):
    path = _out(cfg) / "crossval" / "report.json"
    if not path.exists():
        raise ConfigError(f"no report at {path}; run 'marginfer crossval' first")
    report = json.loads(path.read_text())
    if report.get("schema") != REPORT_SCHEMA:
        raise ConfigError(f"{path} is not a marginfer report")
    print(format_report(report))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for independent trainings")
    common.add_argument("--out", help="run directory (default: config 'out' or ./run)")

    p = argparse.ArgumentParser(prog="marginfer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"marginfer {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", parents=[common], help="draw training and test simulations")

    t = sub.add_parser("train", parents=[common], help="train moment networks or flows")
    t.add_argument("--method", choices=("moments", "flow"), required=True)
    t.add_argument("--data", help="dataset (default: OUT/train.bin)")
    t.add_argument("--pairs", help="'a,b;c,d' or 'all'")
    t.add_argument("--resume", action="store_true", help="continue from saved training state")
    t.add_argument("--allow-many-pairs", action="store_true")

    m = sub.add_parser("mcmc", parents=[common], help="reference chain on the analytic posterior")
    m.add_argument("--mcmc-steps", type=int)
    m.add_argument("--mcmc-walkers", type=int)
    m.add_argument("--obs", help="observation file (JSON array or whitespace-separated)")
    m.add_argument("--obs-index", type=int, default=0, help="test-set row used when --obs is absent")

    c = sub.add_parser("corner", parents=[common], help="emit corner-plot data")
    c.add_argument("--pairs", help="'a,b;c,d' or 'all'")
    c.add_argument("--resolution", type=int)
    c.add_argument("--obs")
    c.add_argument("--obs-index", type=int, default=0)
    c.add_argument("--allow-many-pairs", action="store_true")

    x = sub.add_parser("crossval", parents=[common], help="compare estimators and write the report")
    x.add_argument("--mcmc-steps", type=int)
    x.add_argument("--mcmc-walkers", type=int)

    sub.add_parser("report", parents=[common], help="print the saved report")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "mcmc": cmd_mcmc,
    "corner": cmd_corner,
    "crossval": cmd_crossval,
    "report": cmd_report,
}


def main(argv=None):
    level = getattr(logging, os.environ.get("MARGINFER_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = resolve_config(args)
        _print_config(args.command, cfg)
        return COMMANDS[args.command](cfg, args)
    except MarginferError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (IndexError, ValueError) as exc:
        # argument errors raised below the command layer
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
