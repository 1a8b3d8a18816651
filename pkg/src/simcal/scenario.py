"""Nutrient-load scenario prediction over posterior samples.

Each scenario reruns the simulator at every posterior parameter draw with a
load multiplier applied, then summarizes the importance-weighted ensemble:
the probability of reaching good ecological status (region-mean surface
chlorophyll-a below a threshold within a summer window), predictive intervals
for the calibration observations, and per-(box, variable) R² diagnostics.
"""

from __future__ import annotations

import concurrent.futures
import csv
import datetime
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from simcal.data_model import CalibrationDataset, LAYER_SURFACE, ParameterVector, VARIABLES
from simcal.sampling import PosteriorSamples


class ScenarioError(RuntimeError):
    """Scenario run invalid (too many failures or empty aggregation window)."""


# default window: 1 July .. 7 September, inclusive day-of-year range
_GES_WINDOW = (182, 250)


@dataclass(frozen=True)
class ScenarioSpec:
    """A named load scenario and its status-assessment settings.

    Simulated day t maps to day-of-year (t mod 365) + 1; the window is an
    inclusive day-of-year range. ``region=None`` means all boxes.
    """

    name: str
    load_multiplier: float = 1.0
    ges_threshold: float = 3.0
    ges_window: tuple[int, int] = _GES_WINDOW
    region: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.load_multiplier < 0:
            raise ValueError("load multiplier must be non-negative")
        lo, hi = self.ges_window
        if not 1 <= lo <= hi <= 366:
            raise ValueError("window must be a non-empty day-of-year range")
        if self.region is not None and len(self.region) == 0:
            raise ValueError("region must be non-empty")


@dataclass
class PredictiveEnsemble:
    """Scenario outputs per surviving posterior sample, with aligned weights."""

    spec: ScenarioSpec
    outputs: list                      # SimulatorOutput per surviving sample
    weights: np.ndarray                # renormalized to mean one
    sample_indices: np.ndarray         # indices into the posterior sample set
    failures: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.outputs)


def _run_one(simulator, params, mult):
    try:
        return simulator.evaluate(params, mult), None
    except Exception as exc:
        return None, f"{type(exc).__name__}: {exc}"


def run_scenario(simulator, spec: ScenarioSpec, samples: PosteriorSamples,
                 bau_outputs: list | None = None, jobs: int = 1) -> PredictiveEnsemble:
    """One deterministic simulator run per posterior draw.

    For a multiplier-one scenario the cached business-as-usual outputs from
    the weighting stage are reused verbatim. Failed runs are dropped and the
    weights renormalized; more than 10% failures aborts the scenario.
    """
    n = len(samples)
    if spec.load_multiplier == 1.0 and bau_outputs is not None:
        if len(bau_outputs) != n:
            raise ScenarioError("cached outputs not aligned with posterior samples")
        return PredictiveEnsemble(spec, list(bau_outputs), samples.weights.copy(),
                                  np.arange(n))
    params = [ParameterVector.from_array(samples.thetas[s], samples.names).natural()
              for s in range(n)]
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, [simulator] * n, params,
                                    [spec.load_multiplier] * n))
    else:
        results = [_run_one(simulator, p, spec.load_multiplier) for p in params]
    outputs, kept, failures = [], [], []
    for s, (out, err) in enumerate(results):
        if err is None:
            outputs.append(out)
            kept.append(s)
        else:
            failures.append({"sample": s, "error": err})
    if len(outputs) < math.ceil(0.9 * n):
        raise ScenarioError(
            f"scenario {spec.name!r}: only {len(outputs)}/{n} runs succeeded")
    w = samples.weights[kept]
    w = w / w.mean()
    return PredictiveEnsemble(spec, outputs, w, np.asarray(kept, int), failures)


def _window_days(spec: ScenarioSpec, day_count: int) -> np.ndarray:
    doy = np.arange(day_count) % 365 + 1
    days = np.where((doy >= spec.ges_window[0]) & (doy <= spec.ges_window[1]))[0]
    if days.size == 0:
        raise ScenarioError("assessment window does not intersect the simulated days")
    return days


def window_mean_chla(out, spec: ScenarioSpec) -> float:
    """Region mean of surface chlorophyll-a over the assessment window.

    Days are averaged first, then boxes with equal area weights.
    """
    days = _window_days(spec, out.day_count)
    boxes = (np.arange(out.box_count) if spec.region is None
             else np.asarray(spec.region, int))
    chla = out.tensor[LAYER_SURFACE, VARIABLES.index("chla")]
    return float(chla[np.ix_(days, boxes)].mean(axis=0).mean())


def ges_probability(ens: PredictiveEnsemble, spec: ScenarioSpec | None = None) -> float:
    """Weighted fraction of samples whose window mean is below the threshold."""
    spec = ens.spec if spec is None else spec
    means = np.array([window_mean_chla(out, spec) for out in ens.outputs])
    below = means < spec.ges_threshold
    return float(ens.weights[below].sum() / ens.weights.sum())


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    """Inclusive cumulative-weight quantiles with linear interpolation."""
    values = np.asarray(values, float)
    weights = np.asarray(weights, float)
    order = np.argsort(values)
    v = values[order]
    w = weights[order]
    cw = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(np.asarray(q, float), cw, v)


def interval_pair(f_log: np.ndarray, sigma_log: np.ndarray, weights: np.ndarray,
                  level_param: float, level_obs: float,
                  rng: np.random.Generator, n_noise: int = 30):
    """Parameter-induced and observation predictive intervals on the log scale.

    The parameter interval is a weighted quantile pair of the predictions;
    the observation interval adds per-sample Gaussian noise replicates before
    taking quantiles. At equal levels the observation interval is widened to
    contain the parameter one, so Monte Carlo error never violates the fact
    that added noise can only broaden the predictive distribution.
    """
    a = 0.5 * (1 - level_param)
    par = weighted_quantile(f_log, weights, [a, 1 - a])
    if np.all(sigma_log == 0):
        b = 0.5 * (1 - level_obs)
        obs = weighted_quantile(f_log, weights, [b, 1 - b])
    else:
        z = rng.standard_normal((f_log.size, n_noise))
        y = (f_log[:, None] + sigma_log[:, None] * z).ravel()
        w = np.repeat(weights / n_noise, n_noise)
        b = 0.5 * (1 - level_obs)
        obs = weighted_quantile(y, w, [b, 1 - b])
    if level_obs >= level_param:
        obs = np.array([min(obs[0], par[0]), max(obs[1], par[1])])
    return par, obs


def predictive_intervals(ens: PredictiveEnsemble, samples: PosteriorSamples,
                         ds: CalibrationDataset, level_param: float = 0.95,
                         level_obs: float = 0.80, seed: int = 0) -> list[dict]:
    """Interval table for every calibration observation, in natural units.

    The observation interval adds log-Gaussian noise with each sample's
    per-group variance draw (standardized scale), following the posterior
    predictive distribution of a new measurement.
    """
    rng = np.random.default_rng(seed)
    ki = {k: i for i, k in enumerate(VARIABLES)}
    rows = []
    for o in sorted(ds.observations,
                    key=lambda o: (o.layer, VARIABLES.index(o.variable), o.day, o.box)):
        jk = (o.layer, o.variable)
        _, std = ds.standardizers[jk]
        f_log = np.log([out.tensor[o.layer, ki[o.variable], o.day, o.box]
                        for out in ens.outputs])
        sigma_log = np.sqrt(samples.sigma2[jk][ens.sample_indices]) * std
        par, obs = interval_pair(f_log, sigma_log, ens.weights,
                                 level_param, level_obs, rng)
        rows.append({"layer": o.layer, "variable": o.variable, "day": o.day,
                     "box": o.box, "value": o.value, "censored": o.censored,
                     "param_lo": math.exp(par[0]), "param_hi": math.exp(par[1]),
                     "obs_lo": math.exp(obs[0]), "obs_hi": math.exp(obs[1])})
    return rows


def _doy_month(day: int) -> int:
    doy = day % 365 + 1
    return (datetime.date(2001, 1, 1) + datetime.timedelta(days=doy - 1)).month


def r_squared(ens: PredictiveEnsemble, ds: CalibrationDataset,
              month_filter: tuple[int, ...] | None = None) -> dict[tuple[int, str], float]:
    """Coefficient of determination of the weighted mean log prediction.

    Computed per (box, variable) over non-censored observations, optionally
    restricted to calendar months. A cell with zero spread in the observed
    logs raises.
    """
    ki = {k: i for i, k in enumerate(VARIABLES)}
    w = ens.weights / ens.weights.sum()
    cells: dict[tuple[int, str], list[tuple[float, float]]] = {}
    for o in ds.observations:
        if o.censored:
            continue
        if month_filter is not None and _doy_month(o.day) not in month_filter:
            continue
        f_log = np.log([out.tensor[o.layer, ki[o.variable], o.day, o.box]
                        for out in ens.outputs])
        pred = float(w @ f_log)
        cells.setdefault((o.box, o.variable), []).append((math.log(o.value), pred))
    result = {}
    for cell, pairs in cells.items():
        y = np.array([p[0] for p in pairs])
        yhat = np.array([p[1] for p in pairs])
        ss_tot = float(np.sum((y - y.mean()) ** 2))
        if ss_tot <= 0:
            raise ScenarioError(f"zero observation spread in cell {cell}")
        result[cell] = 1.0 - float(np.sum((y - yhat) ** 2)) / ss_tot
    return result


def write_scenario_outputs(outdir, ens: PredictiveEnsemble, samples: PosteriorSamples,
                           ds: CalibrationDataset, seed: int = 0,
                           month_filter: tuple[int, ...] | None = (6, 7, 8, 9)):
    """Write summary.json, intervals.csv, r2.csv and the chla density CSV."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    spec = ens.spec

    means = np.array([window_mean_chla(out, spec) for out in ens.outputs])
    with open(outdir / "summary.json", "w") as fh:
        json.dump({"scenario": spec.name, "load_multiplier": spec.load_multiplier,
                   "ges_probability": ges_probability(ens),
                   "ess": samples.ess, "n_runs": len(ens),
                   "n_failures": len(ens.failures)}, fh, indent=2)

    with open(outdir / "chla_density.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_mean_chla", "weight"])
        for m, wt in zip(means, ens.weights):
            writer.writerow([f"{m:.17g}", f"{wt:.17g}"])

    rows = predictive_intervals(ens, samples, ds, seed=seed)
    with open(outdir / "intervals.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)

    try:
        r2 = r_squared(ens, ds, month_filter)
    except ScenarioError:
        r2 = {}
    with open(outdir / "r2.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["box", "variable", "r_squared"])
        for (box, var), val in sorted(r2.items()):
            writer.writerow([box, var, f"{val:.6g}"])
