"""Calibration data ingestion, index mapping, censoring and standardization.

Observations are indexed by (layer, variable, day, box) and matched against a
dense simulator output tensor of the same shape. All statistics are computed
on the natural-log scale; each (layer, variable) group carries its own
standardizer estimated from the non-censored observations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

VARIABLES = ("DIN", "DIP", "chla", "A", "FC")
SURFACE_ONLY = frozenset({"chla", "A", "FC"})
LAYER_SURFACE = 0
LAYER_DEEP = 1
N_LAYERS = 2


class DataError(ValueError):
    """Raised on malformed or inconsistent calibration data."""


@dataclass(frozen=True)
class ParameterVector:
    """Point in d-dimensional log-parameter space with named components."""

    values: tuple[float, ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.values) < 1 or len(self.values) != len(self.names):
            raise ValueError("values and names must be non-empty and aligned")
        if len(set(self.names)) != len(self.names):
            raise ValueError("parameter names must be unique")
        if not all(math.isfinite(v) for v in self.values):
            raise ValueError("parameter values must be finite")

    @property
    def dim(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    def natural(self) -> dict[str, float]:
        """Parameter values on the natural (exponentiated) scale."""
        return {n: math.exp(v) for n, v in zip(self.names, self.values)}

    @staticmethod
    def from_array(x, names) -> "ParameterVector":
        return ParameterVector(tuple(float(v) for v in x), tuple(names))


@dataclass(frozen=True)
class Observation:
    """A single monitoring measurement in natural units.

    ``censor_bound`` is the detection threshold; it is set iff ``censored``.
    """

    layer: int
    variable: str
    day: int
    box: int
    value: float
    censored: bool = False
    censor_bound: float | None = None

    def __post_init__(self):
        if self.variable not in VARIABLES:
            raise DataError(f"unknown variable {self.variable!r}")
        if self.layer not in (LAYER_SURFACE, LAYER_DEEP):
            raise DataError(f"layer must be 0 (surface) or 1 (deep), got {self.layer}")
        if self.layer == LAYER_DEEP and self.variable in SURFACE_ONLY:
            raise DataError(f"{self.variable} is surface-only (deep layer invalid)")
        if self.censored:
            if self.censor_bound is None or self.censor_bound <= 0:
                raise DataError("censored observation needs a positive bound")
        elif self.value <= 0:
            raise DataError(f"non-censored value must be positive, got {self.value}")


@dataclass(frozen=True)
class SimulatorOutput:
    """Dense output tensor over (layer, variable, day, box), natural units."""

    tensor: np.ndarray  # shape (2, 5, T, N), all entries > 0

    def __post_init__(self):
        t = self.tensor
        if t.ndim != 4 or t.shape[0] != N_LAYERS or t.shape[1] != len(VARIABLES):
            raise ValueError(f"expected shape (2, 5, T, N), got {t.shape}")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("simulator output must be finite and positive")

    @property
    def day_count(self) -> int:
        return self.tensor.shape[2]

    @property
    def box_count(self) -> int:
        return self.tensor.shape[3]


@dataclass
class CalibrationDataset:
    """Observations with censoring flags and per-(layer, variable) standardizers."""

    observations: list[Observation]
    standardizers: dict[tuple[int, str], tuple[float, float]]  # (j,k) -> (mean, std) of logs
    censor_thresholds: dict[str, float]
    # cached index arrays per (layer, variable) group, split by censoring
    _groups: dict[tuple[int, str], dict] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._groups:
            self._build_groups()

    def _build_groups(self):
        for j in (LAYER_SURFACE, LAYER_DEEP):
            for k in VARIABLES:
                obs = [o for o in self.observations if o.layer == j and o.variable == k]
                if not obs:
                    continue
                noncens = [o for o in obs if not o.censored]
                cens = [o for o in obs if o.censored]
                self._groups[(j, k)] = {
                    "noncens": noncens,
                    "cens": cens,
                    "noncens_idx": np.array([(o.day, o.box) for o in noncens], dtype=int).reshape(-1, 2),
                    "cens_idx": np.array([(o.day, o.box) for o in cens], dtype=int).reshape(-1, 2),
                    "noncens_logvals": np.log([o.value for o in noncens]) if noncens else np.empty(0),
                    "cens_logbounds": np.log([o.censor_bound for o in cens]) if cens else np.empty(0),
                }

    @property
    def groups(self) -> list[tuple[int, str]]:
        return sorted(self._groups.keys(), key=lambda jk: (jk[0], VARIABLES.index(jk[1])))

    def standardize(self, x: float, j: int, k: str) -> float:
        """Map a natural-units value to the standardized log scale of group (j, k)."""
        if x <= 0:
            raise DataError(f"cannot standardize non-positive value {x}")
        mean, std = self.standardizers[(j, k)]
        return (math.log(x) - mean) / std

    def unstandardize(self, z: float, j: int, k: str) -> float:
        mean, std = self.standardizers[(j, k)]
        return math.exp(z * std + mean)

    def align(self, out: SimulatorOutput) -> dict[tuple[int, str], tuple[np.ndarray, np.ndarray]]:
        """Per-group standardized residuals and censoring gaps against an output.

        Returns, for each (layer, variable) group, the pair
        ``(eps, gaps)`` where ``eps[i] = y_std - f_std`` over non-censored
        observations and ``gaps[i] = a_std - f_std`` over censored ones.
        """
        result = {}
        ki = {k: i for i, k in enumerate(VARIABLES)}
        for (j, k), grp in self._groups.items():
            mean, std = self.standardizers[(j, k)]
            v = ki[k]

            def predicted_logs(idx):
                if idx.shape[0] == 0:
                    return np.empty(0)
                days, boxes = idx[:, 0], idx[:, 1]
                if days.max(initial=-1) >= out.day_count or boxes.max(initial=-1) >= out.box_count:
                    raise DataError(f"observation index out of range for group ({j}, {k})")
                return np.log(out.tensor[j, v, days, boxes])

            f_nc = (predicted_logs(grp["noncens_idx"]) - mean) / std
            f_c = (predicted_logs(grp["cens_idx"]) - mean) / std
            eps = (grp["noncens_logvals"] - mean) / std - f_nc
            gaps = (grp["cens_logbounds"] - mean) / std - f_c
            result[(j, k)] = (eps, gaps)
        return result


LAYER_CODES = {1: LAYER_SURFACE, 2: LAYER_DEEP}


def load_dataset(path, thresholds: dict[str, float]) -> CalibrationDataset:
    """Load calibration data from CSV and apply censoring thresholds.

    Expected header: ``box,layer,variable,day,value`` with layer codes
    1=surface, 2=deep. Values strictly below their variable's threshold are
    flagged censored with the threshold as bound. Standardizers come from the
    logs of the non-censored values of each (layer, variable) group.
    """
    for k in thresholds:
        if k not in VARIABLES:
            raise DataError(f"threshold for unknown variable {k!r}")
    observations = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"box", "layer", "variable", "day", "value"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"CSV header must contain {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                box = int(row["box"])
                layer_code = int(row["layer"])
                variable = row["variable"].strip()
                day = int(row["day"])
                value = float(row["value"])
            except (TypeError, ValueError) as exc:
                raise DataError(f"line {lineno}: {exc}") from exc
            if layer_code not in LAYER_CODES:
                raise DataError(f"line {lineno}: unknown layer code {layer_code}")
            if value <= 0:
                raise DataError(f"line {lineno}: non-positive value {value}")
            thr = thresholds.get(variable)
            censored = thr is not None and value < thr
            observations.append(
                Observation(
                    layer=LAYER_CODES[layer_code],
                    variable=variable,
                    day=day,
                    box=box,
                    value=value,
                    censored=censored,
                    censor_bound=thr if censored else None,
                )
            )
    if not observations:
        raise DataError("empty dataset")

    standardizers = {}
    for j in (LAYER_SURFACE, LAYER_DEEP):
        for k in VARIABLES:
            logs = [math.log(o.value) for o in observations
                    if o.layer == j and o.variable == k and not o.censored]
            n_any = sum(1 for o in observations if o.layer == j and o.variable == k)
            if n_any == 0:
                continue
            if len(logs) < 2:
                raise DataError(f"group ({j}, {k}) has < 2 non-censored values")
            mean = float(np.mean(logs))
            std = float(np.std(logs, ddof=0))
            if std <= 0:
                raise DataError(f"group ({j}, {k}) has zero spread on log scale")
            standardizers[(j, k)] = (mean, std)

    return CalibrationDataset(observations, standardizers, dict(thresholds))
