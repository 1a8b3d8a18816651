"""Shared synthetic-truth experiment used by the end-to-end tests.

Data are generated from the toy simulator at a known parameter vector with
multiplicative log-normal noise; nutrient series are observed year-round
(surface and deep), biology only during the growing season. Censoring uses
the detection thresholds DIN < 10 and DIP < 3 ug/l.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from simcal.data_model import ParameterVector, load_dataset
from simcal.sim import ToyConfig, ToySimulator

PARAM_NAMES = ("Klight", "N2fixThres", "ProdThres", "RAmax", "RFCmax")
THRESHOLDS = {"DIN": 10.0, "DIP": 3.0}
NOISE_SD_LOG = 0.3

# true parameters: Klight/RAmax/RFCmax displaced from the prior means, the
# two switch thresholds at theirs (the damped regime never triggers
# nitrogen fixation, so the data cannot inform them)
THETA_STAR = np.array([math.log(10) + 0.15, math.log(15), math.log(10), -2.2, -2.6])


def experiment_config() -> ToyConfig:
    """Toy-model constants giving smooth, identifiable dynamics.

    Gentler growth/mixing than the package defaults keeps the plankton
    cycle out of the boom-bust regime, so the likelihood surface is smooth
    enough for GP emulation; the load and boundary levels put roughly 10%
    of the surface nutrient observations below the detection thresholds.
    """
    return ToyConfig(days=1460, floor=0.05, mixing=0.1, mu_a=0.4, mu_fc=0.3,
                     load_din_base=(1.0, 1.3, 1.6),
                     load_dip_base=(0.12, 0.15, 0.18),
                     deep_din_mean=25.0, deep_dip_mean=7.0)


def simulator() -> ToySimulator:
    return ToySimulator(experiment_config())


def _observation_rows(out, rng, day_offset: int):
    """(box, layer_code, variable, day, noisy value) rows for one design."""
    nut_days = [t for t in range(365, out.day_count) if t % 14 == day_offset]
    bio_days = [t for t in nut_days if 90 <= t % 365 <= 300]
    vi = {"DIN": 0, "DIP": 1, "chla": 2, "A": 3, "FC": 4}
    series = [(1, 0, "DIN", nut_days), (1, 0, "DIP", nut_days),
              (2, 1, "DIN", nut_days), (2, 1, "DIP", nut_days),
              (1, 0, "chla", bio_days), (1, 0, "A", bio_days), (1, 0, "FC", bio_days)]
    rows = []
    for layer_code, j, var, days in series:
        for t in days:
            for r in range(out.box_count):
                y = out.tensor[j, vi[var], t, r] * math.exp(
                    NOISE_SD_LOG * rng.standard_normal())
                rows.append((r, layer_code, var, t, y))
    return rows


def write_dataset_csv(path, seed: int = 7, day_offset: int = 0,
                      theta=THETA_STAR) -> None:
    """Generate a synthetic monitoring CSV at the given true parameters."""
    sim = simulator()
    pv = ParameterVector.from_array(np.asarray(theta), PARAM_NAMES)
    out = sim.evaluate(pv.natural(), 1.0)
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["box", "layer", "variable", "day", "value"])
        for row in _observation_rows(out, rng, day_offset):
            writer.writerow([row[0], row[1], row[2], row[3], f"{row[4]:.10g}"])


def make_dataset(tmpdir, seed: int = 7, day_offset: int = 0, theta=THETA_STAR):
    """Write and load the synthetic calibration dataset."""
    path = str(tmpdir / f"synthetic_{seed}_{day_offset}.csv")
    write_dataset_csv(path, seed=seed, day_offset=day_offset, theta=theta)
    return load_dataset(path, THRESHOLDS)
