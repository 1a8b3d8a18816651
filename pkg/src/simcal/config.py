"""Run configuration: one TOML file validated into typed settings.

Unknown keys anywhere in the file are rejected before any simulator runs, so
a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields
from pathlib import Path

from simcal.calibrate import BOConfig
from simcal.likelihood import NoiseModel, PriorSpec
from simcal.scenario import ScenarioSpec
from simcal.sim import ExternalSimulator, ToyConfig, ToySimulator


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


@dataclass(frozen=True)
class SamplerConfig:
    n_mcmc: int = 200
    gibbs_iters: int = 50

    def __post_init__(self):
        if self.n_mcmc < 1:
            raise ConfigError("n_mcmc must be positive")
        if self.gibbs_iters < 10:
            raise ConfigError("gibbs_iters must be at least 10")


@dataclass(frozen=True)
class RunConfig:
    """Validated settings for a full calibration/sampling/scenario run."""

    data_path: str
    thresholds: dict[str, float]
    prior: PriorSpec
    noise: NoiseModel
    bo: BOConfig
    sampler: SamplerConfig
    simulator_kind: str                 # "toy" | "external"
    toy: ToyConfig | None
    command_template: str | None
    sim_timeout: float
    scenarios: tuple[ScenarioSpec, ...]
    seed: int
    rundir: str | None
    jobs: int
    config_hash: str = ""

    def build_simulator(self):
        if self.simulator_kind == "toy":
            return ToySimulator(self.toy or ToyConfig())
        return ExternalSimulator(self.command_template, timeout=self.sim_timeout)


def _take(table: dict, section: str, allowed: set[str]) -> dict:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    return table


def _build_dataclass(cls, table: dict, section: str):
    names = {f.name for f in fields(cls)}
    _take(table, section, names)
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v
                      for k, v in table.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def load_config(path, seed: int | None = None, rundir: str | None = None,
                jobs: int | None = None) -> RunConfig:
    """Parse and validate a TOML run configuration, with CLI overrides."""
    text = Path(path).read_bytes()
    try:
        raw = tomllib.loads(text.decode())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    digest = hashlib.sha256(text).hexdigest()[:16]

    top_allowed = {"data", "prior", "noise", "bo", "sampler", "simulator",
                   "scenario", "seed", "rundir", "jobs"}
    _take(raw, "top level", top_allowed)

    data = _take(dict(raw.get("data", {})), "data", {"path", "thresholds"})
    if "path" not in data:
        raise ConfigError("[data] needs a 'path'")
    thresholds = {str(k): float(v) for k, v in data.get("thresholds", {}).items()}

    prior_raw = dict(raw.get("prior", {}))
    if prior_raw:
        prior = _build_dataclass(PriorSpec, prior_raw, "prior")
    else:
        prior = PriorSpec.default()
    noise = _build_dataclass(NoiseModel, dict(raw.get("noise", {})), "noise")
    bo = _build_dataclass(BOConfig, dict(raw.get("bo", {})), "bo")
    sampler = _build_dataclass(SamplerConfig, dict(raw.get("sampler", {})), "sampler")

    sim_raw = dict(raw.get("simulator", {}))
    _take(sim_raw, "simulator", {"kind", "command_template", "timeout", "toy"})
    kind = sim_raw.get("kind", "toy")
    if kind not in ("toy", "external"):
        raise ConfigError(f"simulator kind must be 'toy' or 'external', got {kind!r}")
    toy = None
    command = None
    if kind == "toy":
        toy = _build_dataclass(ToyConfig, dict(sim_raw.get("toy", {})), "simulator.toy")
    else:
        command = sim_raw.get("command_template")
        if not command:
            raise ConfigError("external simulator needs a command_template")

    scenarios = []
    for i, sc in enumerate(raw.get("scenario", [])):
        sc = dict(sc)
        if "region" in sc and sc["region"] is not None:
            sc["region"] = tuple(sc["region"])
        if "ges_window" in sc:
            sc["ges_window"] = tuple(sc["ges_window"])
        scenarios.append(_build_dataclass(ScenarioSpec, sc, f"scenario[{i}]"))

    run_seed = int(raw.get("seed", 0)) if seed is None else int(seed)
    if "seed" not in raw.get("bo", {}):
        bo = dataclasses.replace(bo, seed=run_seed)

    return RunConfig(
        data_path=str(data["path"]),
        thresholds=thresholds,
        prior=prior,
        noise=noise,
        bo=bo,
        sampler=sampler,
        simulator_kind=kind,
        toy=toy,
        command_template=command,
        sim_timeout=float(sim_raw.get("timeout", 600.0)),
        scenarios=tuple(scenarios),
        seed=run_seed,
        rundir=raw.get("rundir") if rundir is None else rundir,
        jobs=int(raw.get("jobs", 1)) if jobs is None else int(jobs),
        config_hash=digest,
    )
