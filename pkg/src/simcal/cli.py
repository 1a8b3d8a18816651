"""Command-line interface: calibrate, sample, scenario, simulate.

Exit codes: 0 success, 2 configuration error, 3 simulator error, 4 numerical
failure. Every artifact directory carries a run_meta.json with the config
hash and seed so a run is reproducible from (config, seed) alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from simcal import calibrate as calmod
from simcal import sampling, scenario as scen
from simcal.acquisition import BatchSelectionError, SearchBox
from simcal.config import ConfigError, RunConfig, load_config
from simcal.data_model import DataError, ParameterVector, load_dataset
from simcal.gp import FitError, GPEmulator
from simcal.sim import SimulatorError, write_output_csv

EXIT_CONFIG = 2
EXIT_SIMULATOR = 3
EXIT_NUMERICAL = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _require_rundir(cfg: RunConfig) -> Path:
    if not cfg.rundir:
        raise CliError("a run directory is required (--rundir or rundir= in config)",
                       EXIT_CONFIG)
    return Path(cfg.rundir)


def _write_meta(rundir: Path, cfg: RunConfig, stage: str):
    rundir.mkdir(parents=True, exist_ok=True)
    meta_path = rundir / "run_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if meta and meta.get("config_hash") != cfg.config_hash:
        raise CliError("run directory was created with a different config", EXIT_CONFIG)
    meta.update({"config_hash": cfg.config_hash, "seed": cfg.seed})
    meta.setdefault("stages", [])
    if stage not in meta["stages"]:
        meta["stages"].append(stage)
    meta_path.write_text(json.dumps(meta, indent=2))


def _load_inputs(cfg: RunConfig):
    ds = load_dataset(cfg.data_path, cfg.thresholds)
    return ds, cfg.build_simulator()


def cmd_calibrate(cfg: RunConfig) -> int:
    rundir = _require_rundir(cfg)
    _write_meta(rundir, cfg, "calibrate")
    ds, simulator = _load_inputs(cfg)
    result = calmod.calibrate_full(simulator, ds, cfg.prior, cfg.noise, cfg.bo,
                                   rundir=rundir, jobs=cfg.jobs)
    print(result.report)
    return 0


def _load_calibration(rundir: Path, cfg: RunConfig):
    emu_path = rundir / "emulator.json"
    if not emu_path.exists():
        raise CliError(f"no calibrated emulator at {emu_path}; run 'calibrate' first",
                       EXIT_CONFIG)
    gp = GPEmulator.from_json(emu_path.read_text())
    boxes = json.loads((rundir / "box.json").read_text())
    sampling = boxes.get("sampling", boxes["buffer"])
    sampling_box = SearchBox(np.asarray(sampling["lower"]),
                             np.asarray(sampling["upper"]))
    laplace = calmod.LaplaceApprox.from_json((rundir / "laplace.json").read_text())
    return gp, sampling_box, laplace


def cmd_sample(cfg: RunConfig) -> int:
    rundir = _require_rundir(cfg)
    gp, sampling_box, laplace = _load_calibration(rundir, cfg)
    _write_meta(rundir, cfg, "sample")
    ds, simulator = _load_inputs(cfg)
    start = sampling_box.clip(laplace.mode)
    thetas, stride, n_raw = sampling.sample_posterior(
        gp, sampling_box, cfg.sampler.n_mcmc, seed=cfg.seed, start=start)
    samples, _outputs = sampling.complete_samples(
        thetas, simulator, ds, cfg.prior, cfg.noise, gp, seed=cfg.seed,
        stride=stride, n_raw=n_raw, gibbs_iters=cfg.sampler.gibbs_iters)
    samples.write_csv(rundir / "samples.csv")
    samples.write_diagnostics(rundir / "diagnostics.json")
    print(f"wrote {len(samples)} samples, ESS {samples.ess:.1f}")
    return 0


def _load_samples(rundir: Path, cfg: RunConfig, ds) -> sampling.PosteriorSamples:
    path = rundir / "samples.csv"
    if not path.exists():
        raise CliError(f"no posterior samples at {path}; run 'sample' first",
                       EXIT_CONFIG)
    import csv as _csv
    names = tuple(cfg.prior.names)
    thetas, weights = [], []
    sigma_cols = {}
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        for row in reader:
            thetas.append([float(row[n]) for n in names])
            weights.append(float(row["weight"]))
            for col in row:
                if col.startswith("sigma2_"):
                    sigma_cols.setdefault(col, []).append(float(row[col]))
    sigma2 = {}
    for col, vals in sigma_cols.items():
        _, j, k = col.split("_", 2)
        sigma2[(int(j), k)] = np.asarray(vals)
    weights = np.asarray(weights)
    diag_path = rundir / "diagnostics.json"
    diag = json.loads(diag_path.read_text()) if diag_path.exists() else {}
    return sampling.PosteriorSamples(
        names=names, thetas=np.asarray(thetas), sigma2=sigma2, weights=weights,
        ess=diag.get("ess", len(weights) / (1.0 + float(np.var(weights)))),
        stride=diag.get("stride", 0), n_raw=diag.get("n_raw", 0),
        autocorr=diag.get("lag1_autocorr", {}))


def cmd_scenario(cfg: RunConfig, names: list[str]) -> int:
    rundir = _require_rundir(cfg)
    ds, simulator = _load_inputs(cfg)
    samples = _load_samples(rundir, cfg, ds)
    _write_meta(rundir, cfg, "scenario")
    specs = {s.name: s for s in cfg.scenarios}
    if not specs:
        raise CliError("no [[scenario]] entries in the configuration", EXIT_CONFIG)
    selected = names or list(specs)
    missing = [n for n in selected if n not in specs]
    if missing:
        raise CliError(f"unknown scenario name(s): {missing}", EXIT_CONFIG)
    for name in selected:
        spec = specs[name]
        ens = scen.run_scenario(simulator, spec, samples, jobs=cfg.jobs)
        outdir = rundir / f"scenario_{name}"
        scen.write_scenario_outputs(outdir, ens, samples, ds, seed=cfg.seed)
        print(f"{name}: GES probability "
              f"{scen.ges_probability(ens):.4f} ({len(ens)} runs)")
    return 0


def cmd_simulate(cfg: RunConfig, theta_path: str, out_path: str, mult: float) -> int:
    with open(theta_path) as fh:
        theta = json.load(fh)
    if not isinstance(theta, dict):
        raise CliError("theta file must be a JSON object of log-scale parameters",
                       EXIT_CONFIG)
    pv = ParameterVector(tuple(float(theta[n]) for n in cfg.prior.names),
                         tuple(cfg.prior.names))
    simulator = cfg.build_simulator()
    out = simulator.evaluate(pv.natural(), mult)
    write_output_csv(out, out_path)
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simcal",
        description="Bayesian calibration and scenario prediction for "
                    "expensive deterministic simulators")
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--rundir", help="artifact directory (overrides config)")
    parser.add_argument("--seed", type=int, help="random seed (overrides config)")
    parser.add_argument("--jobs", type=int,
                        help="worker processes (default from config, else 1)")
    parser.add_argument("--resume", action="store_true",
                        help="continue a partially completed run")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", help="run the BO mode search and emulator fit")
    sub.add_parser("sample", help="draw posterior samples from the emulator")
    p_scen = sub.add_parser("scenario", help="run load scenarios over the samples")
    p_scen.add_argument("names", nargs="*", help="scenario names (default: all)")
    p_sim = sub.add_parser("simulate", help="single forward simulator run")
    p_sim.add_argument("theta", help="JSON file of log-scale parameter values")
    p_sim.add_argument("--out", default="output.csv", help="output CSV path")
    p_sim.add_argument("--mult", type=float, default=1.0, help="load multiplier")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, rundir=args.rundir,
                          jobs=args.jobs)
        if cfg.jobs < 1:
            raise ConfigError("--jobs must be positive")
        if not args.resume and cfg.rundir and args.command == "calibrate":
            state = Path(cfg.rundir) / "state.json"
            if state.exists():
                raise CliError(
                    f"{cfg.rundir} holds a previous run; pass --resume to continue",
                    EXIT_CONFIG)
        if args.command == "calibrate":
            return cmd_calibrate(cfg)
        if args.command == "sample":
            return cmd_sample(cfg)
        if args.command == "scenario":
            return cmd_scenario(cfg, args.names)
        return cmd_simulate(cfg, args.theta, args.out, args.mult)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulatorError, calmod.RunAbortedError, scen.ScenarioError) as exc:
        print(f"simulator error: {exc}", file=sys.stderr)
        return EXIT_SIMULATOR
    except (FitError, BatchSelectionError, calmod.LaplaceError,
            sampling.SamplingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
