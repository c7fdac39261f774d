"""Configuration-driven command line front end.

Subcommands wire the library into reproducible, file-emitting experiments:

    simulate         draw a dataset (and true path) from a configured model
    filter           run one filtering pass and write a JSON result
    likelihood-bench grid of (method, delta, N) likelihood rMSE cells -> CSV
    pmmh             posterior sampling; writes chain CSV and summary JSON
    bounds           tables of the negative-probability/bias bound evaluators

Every command takes ``--config`` (YAML), ``--seed``, ``--threads`` and
``--out-dir``; identical invocations produce byte-identical primary
outputs, and the thread count never changes any numeric output (replicates
own disjoint, replicate-keyed random streams).  Exit codes: 0 success,
1 runtime failure, 2 configuration error.  Field-by-field units live in
``config_schema.yaml`` next to this module.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import calibration, datagen, estimator, filters, oracles, sde
from .observation import BornWolfParams, BornWolfPsf, GaussianMark, IntensityModel
from .rng import make_stream


class ConfigError(ValueError):
    """Configuration file is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Config -> model objects
# ---------------------------------------------------------------------------


def _build_spec(cfg: dict) -> sde.LinearSdeSpec:
    kind = cfg.get("kind")
    if kind == "ou":
        return sde.LinearSdeSpec.ornstein_uhlenbeck(cfg["rate"], cfg["mean"])
    if kind == "brownian":
        return sde.LinearSdeSpec.brownian(dim=int(cfg.get("dim", 1)), drift=cfg.get("drift"))
    raise ConfigError(f"unknown model kind {kind!r}")


def _build_initial(cfg: dict, spec: sde.LinearSdeSpec) -> sde.InitialLaw:
    kind = cfg.get("kind", "point")
    if kind == "stationary":
        return sde.InitialLaw.stationary(spec)
    if kind == "point":
        return sde.InitialLaw.point(cfg.get("state", np.zeros(spec.dim)))
    if kind == "gaussian":
        return sde.InitialLaw.gaussian(cfg["mean"], np.diag(np.atleast_1d(cfg["variance"])))
    raise ConfigError(f"unknown initial law {kind!r}")


def _build_intensity(cfg: dict) -> IntensityModel:
    kind = cfg.get("kind")
    if kind == "affine":
        return IntensityModel.affine(cfg.get("slope", 1.0), cfg.get("intercept", 0.0))
    if kind == "exponential-depth":
        return IntensityModel.exponential_depth(cfg["peak_rate"], cfg["depth_scale"])
    if kind == "constant":
        return IntensityModel.constant(cfg["rate"])
    raise ConfigError(f"unknown intensity kind {kind!r}")


def _build_marks(cfg: dict):
    kind = cfg.get("kind", "gaussian")
    if kind == "gaussian":
        return GaussianMark(sigma=float(cfg.get("sigma", 1.0)))
    if kind == "born-wolf":
        params = BornWolfParams(
            numerical_aperture=float(cfg.get("numerical_aperture", 1.4)),
            wavelength=float(cfg.get("wavelength", 0.52)),
            refractive_index=float(cfg.get("refractive_index", 1.515)),
            magnification=float(cfg.get("magnification", 100.0)) * np.eye(2),
        )
        return BornWolfPsf(params, cache=bool(cfg.get("cache", True)))
    raise ConfigError(f"unknown mark model {kind!r}")


def _model_bundle(config: dict):
    try:
        spec = _build_spec(config["model"])
        initial = _build_initial(config.get("initial", {}), spec)
        intensity = _build_intensity(config["intensity"])
        marks = _build_marks(config.get("marks", {}))
    except KeyError as exc:
        raise ConfigError(f"missing config key {exc}") from exc
    return spec, initial, intensity, marks


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict, seed: int, out_dir: Path, threads: int) -> int:
    spec, initial, intensity, marks = _model_bundle(config)
    horizon = float(config["horizon"])
    rng = make_stream(seed, "simulate")
    obs, states = datagen.simulate_observations(
        spec,
        intensity,
        marks,
        horizon,
        rng,
        initial,
        rate_max=config.get("rate_max"),
        textbook_mode=bool(config.get("textbook_mode", False)),
    )
    out = out_dir / config.get("dataset", "dataset.txt")
    header = {
        "seed": seed,
        "model": config["model"],
        "intensity": config["intensity"],
        "marks": config.get("marks", {}),
    }
    datagen.write_dataset(out, obs, truth=states, header=header)
    print(f"wrote {obs.count} arrivals to {out}")
    return 0


# ---------------------------------------------------------------------------
# filter
# ---------------------------------------------------------------------------


def _filter_once(config: dict, obs, spec, initial, intensity, marks, rng):
    backend = config.get("backend", {})
    kind = backend.get("kind", "continuous")
    n_particles = int(backend.get("particles", 1000))
    store = bool(config.get("store_clouds", False))
    if kind == "discretised":
        return filters.run_discretised_pf(
            spec, intensity, marks, obs, float(backend["delta"]), n_particles, rng, initial, store_clouds=store
        )
    if kind == "exact-oracle":
        return oracles.run_exact_weight_pf(
            obs, float(backend["delta"]), n_particles, rng, sigma_y=float(config.get("sigma_y", 1.0)), store_clouds=store
        )
    if kind == "continuous":
        seed_l = backend.get("lipschitz_seed")
        if seed_l is None:
            seed_l = intensity.lipschitz_hint() or None
        delta = backend.get("delta", "auto")
        if delta == "auto":
            if seed_l is None:
                raise ConfigError("delta: auto needs a Lipschitz seed or an analytic hint")
            delta = estimator.choose_step_size(
                n_particles,
                obs.horizon,
                seed_l,
                excursion=float(backend.get("excursion", 3.0)),
                epsilon=float(backend.get("epsilon", 1e-6)),
            )
        cfg = estimator.EstimatorConfig(
            delta=float(delta),
            lipschitz=seed_l,
            epsilon=float(backend.get("epsilon", 1e-6)),
            excursion=float(backend.get("excursion", 3.0)),
            policy=backend.get("policy", "truncate"),
        )
        return filters.run_continuous_pf(
            spec, intensity, marks, obs, cfg, n_particles, rng, initial,
            lipschitz_seed=seed_l, store_clouds=store,
        )
    raise ConfigError(f"unknown filter backend {kind!r}")


def cmd_filter(config: dict, seed: int, out_dir: Path, threads: int, dataset: str | None) -> int:
    dataset = dataset or config.get("dataset")
    if dataset is None:
        raise ConfigError("no dataset given (flag --dataset or config key 'dataset')")
    obs, _ = datagen.read_dataset(dataset)
    if config["model"].get("kind") == "brownian-benchmark":
        spec, initial = oracles.BENCHMARK_SPEC, oracles.benchmark_init_law()
        intensity = oracles.BENCHMARK_INTENSITY
        marks = GaussianMark(float(config.get("sigma_y", 1.0)))
    else:
        spec, initial, intensity, marks = _model_bundle(config)
    rng = make_stream(seed, "filter")
    out = _filter_once(config, obs, spec, initial, intensity, marks, rng)
    result_path = out_dir / config.get("result", "result.json")
    out.save(result_path)
    print(f"log-likelihood {out.log_likelihood:.6f} -> {result_path}")
    return 0


# ---------------------------------------------------------------------------
# likelihood-bench
# ---------------------------------------------------------------------------


def _bench_truth(config: dict, obs) -> float:
    sigma_y = float(config.get("sigma_y", 1.0))
    truth_cfg = config.get("truth", {"kind": "closed-form"})
    if truth_cfg.get("kind", "closed-form") == "closed-form":
        if obs.count == 0:
            return oracles.likelihood_no_obs(obs.horizon)
        if obs.count == 2:
            return oracles.likelihood_two_obs(
                obs.times[0], obs.times[1], obs.marks[0, 0], obs.marks[1, 0], obs.horizon, sigma_y
            )
        raise ConfigError(
            f"no closed-form oracle for {obs.count} arrivals; configure truth: exact-weight-mc"
        )
    if truth_cfg["kind"] == "exact-weight-mc":
        runs = int(truth_cfg.get("runs", 100))
        particles = int(truth_cfg.get("particles", 10000))
        delta = float(truth_cfg.get("delta", 0.1))
        seed = int(truth_cfg.get("seed", 0))
        values = [
            oracles.run_exact_weight_pf(obs, delta, particles, make_stream(seed, "truth", r), sigma_y=sigma_y).likelihood
            for r in range(runs)
        ]
        return float(np.mean(values))
    raise ConfigError(f"unknown truth kind {truth_cfg.get('kind')!r}")


def _bench_cell(method, delta, n_particles, reps, obs, sigma_y, truth, seed, threads):
    spec, initial = oracles.BENCHMARK_SPEC, oracles.benchmark_init_law()
    intensity = oracles.BENCHMARK_INTENSITY
    marks = GaussianMark(sigma_y)

    def one(rep: int) -> float:
        rng = make_stream(seed, "bench", method, int(round(delta * 1e9)), n_particles, rep)
        if method == "discretised":
            out = filters.run_discretised_pf(spec, intensity, marks, obs, delta, n_particles, rng, initial)
        elif method == "continuous":
            cfg = estimator.EstimatorConfig(delta=delta, lipschitz=1.0)
            out = filters.run_continuous_pf(
                spec, intensity, marks, obs, cfg, n_particles, rng, initial, lipschitz_seed=1.0
            )
        elif method == "exact-weight":
            out = oracles.run_exact_weight_pf(obs, delta, n_particles, rng, sigma_y=sigma_y)
        else:
            raise ConfigError(f"unknown bench method {method!r}")
        return out.likelihood

    import time as _time

    t0 = _time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = np.fromiter(pool.map(one, range(reps)), float, count=reps)
    else:
        values = np.fromiter(map(one, range(reps)), float, count=reps)
    elapsed = (_time.perf_counter() - t0) / reps
    rmse = float(np.mean((values - truth) ** 2) / truth**2)
    grid = filters.build_time_grid(obs, delta)
    work = n_particles * grid.n_segments
    return rmse, elapsed, work


def cmd_likelihood_bench(config: dict, seed: int, out_dir: Path, threads: int) -> int:
    if "dataset" in config:
        obs, _ = datagen.read_dataset(config["dataset"])
    else:
        bench = config.get("benchmark", {})
        times = np.asarray(bench.get("times", []), float)
        marks = np.asarray(bench.get("marks", []), float)
        obs = filters.ObservationSet(times, marks.reshape(times.size, -1) if times.size else np.empty((0, 1)), float(bench["horizon"]))
    sigma_y = float(config.get("sigma_y", 1.0))
    truth = _bench_truth(config, obs)
    reps = int(config.get("replicates", 100))

    cells = []
    for spec_cfg in config.get("methods", []):
        method = spec_cfg["method"]
        for delta in spec_cfg["deltas"]:
            for n_particles in spec_cfg["particles"]:
                cells.append((method, float(delta), int(n_particles)))

    rows = {}
    for method, delta, n_particles in cells:
        rmse, secs, work = _bench_cell(method, delta, n_particles, reps, obs, sigma_y, truth, seed, threads)
        key = (method, delta, n_particles)
        rows.setdefault(key, []).append((rmse, secs, work))

    out = out_dir / config.get("output", "bench.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "delta", "particles", "work_units", "cpu_seconds", "rmse"])
        for (method, delta, n_particles), results in rows.items():
            rmse = float(np.mean([r[0] for r in results]))
            secs = float(np.mean([r[1] for r in results]))
            work = results[0][2]
            writer.writerow([method, f"{delta:.17g}", n_particles, work, f"{secs:.6e}", f"{rmse:.17g}"])
    print(f"wrote {len(rows)} cells to {out} (truth {truth:.6e})")
    return 0


# ---------------------------------------------------------------------------
# pmmh
# ---------------------------------------------------------------------------

_PARAM_TARGETS = {"rate", "mean", "peak_rate", "depth_scale", "slope", "intercept"}


def _apply_params(model_cfg: dict, intensity_cfg: dict, names, theta):
    model_cfg = json.loads(json.dumps(model_cfg))
    intensity_cfg = json.loads(json.dumps(intensity_cfg))
    for name, value in zip(names, theta):
        base, _, index = name.partition("[")
        if base not in _PARAM_TARGETS:
            raise ConfigError(f"unknown calibration parameter {name!r}")
        if base in ("rate", "mean"):
            idx = int(index.rstrip("]"))
            model_cfg[base][idx] = float(value)
        else:
            intensity_cfg[base] = float(value)
    return model_cfg, intensity_cfg


def cmd_pmmh(config: dict, seed: int, out_dir: Path, threads: int, dataset: str | None) -> int:
    dataset = dataset or config.get("dataset")
    if dataset is None:
        raise ConfigError("no dataset given")
    obs, _ = datagen.read_dataset(dataset)
    params = config.get("parameters", [])
    if not params:
        raise ConfigError("no parameters to calibrate")
    names = [p["name"] for p in params]
    cfg = calibration.PmmhConfig(
        param_names=tuple(names),
        lower=np.array([p["lower"] for p in params], float),
        upper=np.array([p["upper"] for p in params], float),
        iterations=int(config["iterations"]),
        burn_in=int(config.get("burn_in", 0)),
        base_scale=float(config.get("proposal", {}).get("base_scale", 0.1)),
        adapt=bool(config.get("proposal", {}).get("adapt", True)),
        adapt_burnin_only=bool(config.get("proposal", {}).get("adapt_burnin_only", False)),
    )
    backend = config.get("backend", {})
    kind = backend.get("kind", "continuous")
    marks = _build_marks(config.get("marks", {}))
    sigma_y = float(config.get("sigma_y", 1.0))

    if kind == "exact-oracle":
        if obs.count not in (0, 2) or [n for n in names if n != "intercept"]:
            raise ConfigError("exact-oracle backend supports the benchmark with the 'intercept' parameter")

        def log_likelihood(theta, rng):
            beta = float(theta[0])
            if obs.count == 0:
                return math.log(oracles.likelihood_no_obs(obs.horizon, intercept=beta))
            return math.log(
                oracles.likelihood_two_obs(
                    obs.times[0], obs.times[1], obs.marks[0, 0], obs.marks[1, 0], obs.horizon, sigma_y, intercept=beta
                )
            )

    else:
        n_particles = int(backend.get("particles", 200))
        delta = float(backend["delta"]) if kind == "continuous" else float(backend.get("delta", math.inf))

        def log_likelihood(theta, rng):
            model_cfg, intensity_cfg = _apply_params(config["model"], config["intensity"], names, theta)
            spec = _build_spec(model_cfg)
            initial = _build_initial(config.get("initial", {}), spec)
            intensity = _build_intensity(intensity_cfg)
            if kind == "discretised":
                out = filters.run_discretised_pf(
                    spec, intensity, marks, obs, delta, n_particles, rng, initial
                )
            else:
                est_cfg = estimator.EstimatorConfig(delta=delta, lipschitz=intensity.lipschitz_hint() or 1.0)
                out = filters.run_continuous_pf(
                    spec, intensity, marks, obs, est_cfg, n_particles, rng, initial,
                    lipschitz_seed=backend.get("lipschitz_seed") or intensity.lipschitz_hint(),
                )
            return out.log_likelihood

    theta0 = np.array([p.get("init", 0.5 * (p["lower"] + p["upper"])) for p in params], float)
    chain = calibration.pmmh_run(cfg, log_likelihood, theta0, make_stream(seed, "pmmh"))
    chain_path = out_dir / config.get("chain", "chain.csv")
    calibration.save_chain(chain_path, chain, names)
    summary = calibration.chain_summary(chain, names)
    summary_path = out_dir / config.get("summary", "summary.json")
    summary_path.write_text(json.dumps(summary, indent=1))
    means = {k: round(v["mean"], 4) for k, v in summary["parameters"].items()}
    print(f"chain -> {chain_path}; posterior means {means}; acceptance {chain.acceptance_rate:.3f}")
    return 0


# ---------------------------------------------------------------------------
# bounds
# ---------------------------------------------------------------------------


def cmd_bounds(config: dict, seed: int, out_dir: Path, threads: int) -> int:
    lipschitz = float(config.get("lipschitz", 1.0))
    excursion = float(config.get("excursion", 3.0))
    particle_time = float(config.get("particle_time", 1e4))
    horizon = float(config.get("horizon", 1.0))
    grid_cfg = config.get("deltas", {"start": 1e-3, "stop": 1.0, "count": 30})
    deltas = np.geomspace(float(grid_cfg["start"]), float(grid_cfg["stop"]), int(grid_cfg["count"]))
    rule = config.get("eta_rule", {"scale": 1.0, "power": 1.0})
    scale, power = float(rule.get("scale", 1.0)), float(rule.get("power", 1.0))

    out = out_dir / config.get("output", "bounds.csv")
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "delta",
                "eta",
                "endpoint_bound",
                "endpoint_log10",
                "marginal_bound",
                "marginal_log10",
                "marginal_times_t_over_delta",
                "union_budget_log10",
                "truncation_bias_log10",
            ]
        )
        log10 = math.log(10.0)
        for delta in deltas:
            eta = scale * delta**power * lipschitz
            endpoint = estimator.neg_prob_bound_endpoint(eta, delta, lipschitz, excursion * math.sqrt(delta))
            marginal = estimator.neg_prob_bound_marginal(eta, delta, lipschitz)
            union_log10 = (math.log(math.ceil(particle_time / delta)) + endpoint.log_value) / log10
            try:
                bias = estimator.truncation_bias_bound(delta, lipschitz, horizon, max(1, round(horizon / delta)))
                bias_log10 = f"{bias.log_value / log10:.6g}"
            except ValueError:
                bias_log10 = ""
            writer.writerow(
                [
                    f"{delta:.10g}",
                    f"{eta:.10g}",
                    f"{endpoint.value:.10g}",
                    f"{endpoint.log_value / log10:.6g}",
                    f"{marginal.value:.10g}",
                    f"{marginal.log_value / log10:.6g}",
                    f"{marginal.value * horizon / delta:.10g}",
                    f"{union_log10:.6g}",
                    bias_log10,
                ]
            )
    print(f"wrote bound table to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coxpf", description=__doc__)
    parser.add_argument("command", choices=["simulate", "filter", "likelihood-bench", "pmmh", "bounds"])
    parser.add_argument("--config", required=True, help="YAML configuration file")
    parser.add_argument("--dataset", help="dataset file (filter / pmmh)")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=1, help="replicate-level worker threads")
    parser.add_argument("--out-dir", default=".", help="directory for output files")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            config = yaml.safe_load(fh) or {}
        if not isinstance(config, dict):
            raise ConfigError("top-level config must be a mapping")
        seed = args.seed if args.seed is not None else int(config.get("seed", 0))
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    except (OSError, yaml.YAMLError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "simulate":
            return cmd_simulate(config, seed, out_dir, args.threads)
        if args.command == "filter":
            return cmd_filter(config, seed, out_dir, args.threads, args.dataset)
        if args.command == "likelihood-bench":
            return cmd_likelihood_bench(config, seed, out_dir, args.threads)
        if args.command == "pmmh":
            return cmd_pmmh(config, seed, out_dir, args.threads, args.dataset)
        if args.command == "bounds":
            return cmd_bounds(config, seed, out_dir, args.threads)
        raise ConfigError(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
