"""Bayesian calibration and uncertainty quantification for deterministic simulators.

The pipeline: a censored multivariate-t likelihood links simulator output to
monitoring data, batch Bayesian optimization locates the posterior mode of the
calibration parameters, a Gaussian process emulates the (negative log)
posterior density, and slice sampling plus importance reweighting propagate
parameter uncertainty into scenario predictions.
"""

from simcal.data_model import (
    CalibrationDataset,
    Observation,
    ParameterVector,
    SimulatorOutput,
    load_dataset,
)
from simcal.likelihood import NoiseModel, ObjectivePhase, PriorSpec
from simcal.gp import GPEmulator, GPHyperparams
from simcal.calibrate import BOConfig, QueryLog, calibrate_full

__all__ = [
    "BOConfig",
    "CalibrationDataset",
    "GPEmulator",
    "GPHyperparams",
    "NoiseModel",
    "Observation",
    "ObjectivePhase",
    "ParameterVector",
    "PriorSpec",
    "QueryLog",
    "SimulatorOutput",
    "calibrate_full",
    "load_dataset",
]
