"""Simulator boundary: a fast deterministic toy box model and a subprocess adapter.

The toy model is a two-layer nutrient-plankton box model driven by seasonal
light and catchment loads. It exposes the same five calibration parameters as
the production simulator (Klight, N2fixThres, ProdThres, RAmax, RFCmax) and
serves as a cheap test double; its other constants are fixed and never
calibrated. The external adapter drives any simulator process through a
parameter-file / output-CSV contract.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from simcal.data_model import (
    LAYER_CODES,
    N_LAYERS,
    SimulatorOutput,
    VARIABLES,
)

PARAM_NAMES = ("Klight", "N2fixThres", "ProdThres", "RAmax", "RFCmax")


class SimulatorError(RuntimeError):
    """Simulator run failure (crash, timeout, or malformed output)."""


@dataclass(frozen=True)
class ToyConfig:
    """Fixed constants of the toy box model.

    Loads are per-box sinusoidal series in ug/l/day; everything else is a
    scalar rate or half-saturation constant. Only the five calibration
    parameters vary between runs.
    """

    boxes: int = 3
    days: int = 3650
    mu_a: float = 0.5          # max growth rate of other algae, 1/day
    mu_fc: float = 0.4         # max growth rate of cyanobacteria, 1/day
    k_din: float = 5.0         # DIN half saturation, ug/l
    k_dip: float = 2.0         # DIP half saturation, ug/l
    q_n: float = 0.15          # N quota of biomass
    q_p: float = 0.02          # P quota of biomass
    remineralization: float = 0.5
    mixing: float = 0.05       # surface-deep exchange rate, 1/day
    i_max: float = 40.0        # peak irradiance
    spring_day: int = 80       # day of year when irradiance crosses zero upward
    chla_yield: float = 0.02   # chla per unit biomass
    floor: float = 1e-6
    # catchment load amplitudes per box (scaled by the scenario multiplier)
    load_din_base: tuple[float, ...] = (1.0, 1.3, 1.6)
    load_dip_base: tuple[float, ...] = (0.12, 0.15, 0.18)
    # deep-layer boundary concentrations the deep state relaxes toward
    deep_din_mean: float = 25.0
    deep_dip_mean: float = 7.0

    def __post_init__(self):
        if self.days < 365:
            raise ValueError("toy simulation needs at least one year")
        if len(self.load_din_base) != self.boxes or len(self.load_dip_base) != self.boxes:
            raise ValueError("load series must have one amplitude per box")


def _check_params(params_natural: dict[str, float]):
    missing = [p for p in PARAM_NAMES if p not in params_natural]
    if missing:
        raise SimulatorError(f"missing parameters: {missing}")
    bad = [p for p in PARAM_NAMES if not params_natural[p] > 0]
    if bad:
        raise SimulatorError(f"non-positive parameters: {bad}")


def toy_evaluate(params_natural: dict[str, float], mult: float, cfg: ToyConfig) -> SimulatorOutput:
    """Integrate the toy model over ``cfg.days`` with explicit daily steps."""
    _check_params(params_natural)
    klight = params_natural["Klight"]
    n2fix_thres = params_natural["N2fixThres"]
    prod_thres = params_natural["ProdThres"]
    ra_max = params_natural["RAmax"]
    rfc_max = params_natural["RFCmax"]

    n = cfg.boxes
    t_total = cfg.days
    floor = cfg.floor

    din = np.full(n, 60.0)
    dip = np.full(n, 18.0)
    alg = np.full(n, 20.0)
    fc = np.full(n, 10.0)
    din_deep = np.full(n, cfg.deep_din_mean)
    dip_deep = np.full(n, cfg.deep_dip_mean)

    load_din = np.asarray(cfg.load_din_base) * mult
    load_dip = np.asarray(cfg.load_dip_base) * mult

    tensor = np.full((N_LAYERS, len(VARIABLES), t_total, n), floor)
    two_pi = 2.0 * math.pi
    for t in range(t_total):
        irradiance = max(0.0, cfg.i_max * math.sin(two_pi * (t - cfg.spring_day) / 365.0))
        light = irradiance / (irradiance + klight)
        season = 1.0 + 0.6 * math.sin(two_pi * (t - 330) / 365.0)

        lim_n = din / (din + cfg.k_din)
        lim_p = dip / (dip + cfg.k_dip)
        growth_a = cfg.mu_a * light * np.minimum(lim_n, lim_p) * alg
        death_a = ra_max * alg

        rate_fc = cfg.mu_fc * light * lim_p
        fixing = (din < n2fix_thres) & (rate_fc * fc > prod_thres)
        growth_fc = np.where(fixing, rate_fc * fc, rate_fc * lim_n * fc)
        death_fc = rfc_max * fc

        remin = cfg.remineralization * (death_a + death_fc)
        din = (din + load_din * season
               - cfg.q_n * (growth_a + np.where(fixing, 0.0, growth_fc))
               + cfg.q_n * remin
               + cfg.mixing * (din_deep - din))
        dip = (dip + load_dip * season
               - cfg.q_p * (growth_a + growth_fc)
               + cfg.q_p * remin
               + cfg.mixing * (dip_deep - dip))
        alg = alg + growth_a - death_a
        fc = fc + growth_fc - death_fc

        bdry_din = cfg.deep_din_mean * (1.0 + 0.2 * math.sin(two_pi * (t - 30) / 365.0))
        bdry_dip = cfg.deep_dip_mean * (1.0 + 0.2 * math.sin(two_pi * (t - 30) / 365.0))
        din_deep = din_deep + cfg.mixing * (bdry_din - din_deep)
        dip_deep = dip_deep + cfg.mixing * (bdry_dip - dip_deep)

        din = np.maximum(din, floor)
        dip = np.maximum(dip, floor)
        alg = np.maximum(alg, floor)
        fc = np.maximum(fc, floor)
        din_deep = np.maximum(din_deep, floor)
        dip_deep = np.maximum(dip_deep, floor)

        if not (np.all(np.isfinite(din)) and np.all(np.isfinite(dip))
                and np.all(np.isfinite(alg)) and np.all(np.isfinite(fc))):
            raise SimulatorError(f"non-finite state on day {t}")

        tensor[0, 0, t] = din
        tensor[0, 1, t] = dip
        tensor[0, 2, t] = np.maximum(cfg.chla_yield * (alg + fc), floor)
        tensor[0, 3, t] = alg
        tensor[0, 4, t] = fc
        tensor[1, 0, t] = din_deep
        tensor[1, 1, t] = dip_deep

    return SimulatorOutput(tensor)


@dataclass(frozen=True)
class ToySimulator:
    """In-process toy simulator satisfying the simulator contract."""

    cfg: ToyConfig = field(default_factory=ToyConfig)

    def evaluate(self, params_natural: dict[str, float], mult: float = 1.0) -> SimulatorOutput:
        return toy_evaluate(params_natural, mult, self.cfg)

    @property
    def descriptor(self) -> tuple[int, int, tuple[str, ...]]:
        return (self.cfg.boxes, self.cfg.days, VARIABLES)


def write_output_csv(out: SimulatorOutput, path):
    """Write a full output tensor in the calibration-data CSV layout."""
    layer_code = {0: 1, 1: 2}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["box", "layer", "variable", "day", "value"])
        for j in range(N_LAYERS):
            for v, name in enumerate(VARIABLES):
                for t in range(out.day_count):
                    for r in range(out.box_count):
                        writer.writerow([r, layer_code[j], name, t, f"{out.tensor[j, v, t, r]:.17g}"])


def read_output_csv(path) -> SimulatorOutput:
    """Parse an output CSV back into a dense tensor; every cell must be present."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"box", "layer", "variable", "day", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SimulatorError(f"output CSV header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((int(row["box"]), int(row["layer"]), row["variable"].strip(),
                             int(row["day"]), float(row["value"])))
            except (TypeError, ValueError) as exc:
                raise SimulatorError(f"output CSV line {lineno}: {exc}") from exc
    if not rows:
        raise SimulatorError("empty output CSV")
    n = max(r[0] for r in rows) + 1
    t_total = max(r[3] for r in rows) + 1
    tensor = np.full((N_LAYERS, len(VARIABLES), t_total, n), np.nan)
    ki = {k: i for i, k in enumerate(VARIABLES)}
    for box, layer_code, variable, day, value in rows:
        if layer_code not in LAYER_CODES or variable not in ki:
            raise SimulatorError(f"bad output row ({box}, {layer_code}, {variable}, {day})")
        tensor[LAYER_CODES[layer_code], ki[variable], day, box] = value
    if np.any(np.isnan(tensor)):
        raise SimulatorError("output CSV does not cover the full tensor")
    return SimulatorOutput(tensor)


@dataclass(frozen=True)
class ExternalSimulator:
    """Drives an external simulator process via a file contract.

    ``command_template`` must contain ``{params}`` and ``{out}`` placeholders.
    The parameter file is JSON: ``{"params": {...}, "load_multiplier": x}``;
    the output is the tensor CSV produced by :func:`write_output_csv`.
    """

    command_template: str
    timeout: float = 600.0
    workdir: str | None = None

    def evaluate(self, params_natural: dict[str, float], mult: float = 1.0) -> SimulatorOutput:
        _check_params(params_natural)
        if "{params}" not in self.command_template or "{out}" not in self.command_template:
            raise SimulatorError("command template needs {params} and {out} placeholders")
        with tempfile.TemporaryDirectory(dir=self.workdir) as tmp:
            params_path = Path(tmp) / "params.json"
            out_path = Path(tmp) / "output.csv"
            params_path.write_text(json.dumps(
                {"params": dict(params_natural), "load_multiplier": mult}))
            cmd = self.command_template.format(params=params_path, out=out_path)
            try:
                proc = subprocess.run(cmd, shell=True, capture_output=True,
                                      timeout=self.timeout, cwd=tmp)
            except subprocess.TimeoutExpired as exc:
                raise SimulatorError(f"simulator timed out after {self.timeout}s") from exc
            if proc.returncode != 0:
                tail = proc.stderr.decode(errors="replace")[-500:]
                raise SimulatorError(f"simulator exited with {proc.returncode}: {tail}")
            return read_output_csv(out_path)
