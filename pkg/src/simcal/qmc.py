"""Quasi-random sequence helpers shared by the design and acquisition code."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import qmc


def sobol_unit(n: int, d: int, skip_zero: bool = True) -> np.ndarray:
    """First ``n`` points of the unscrambled Sobol sequence in [0, 1)^d.

    With ``skip_zero`` the all-zeros first point is dropped, so the sequence
    starts 0.5, 0.75, 0.25, ... in each coordinate. Deterministic.
    """
    if n < 1:
        raise ValueError("need at least one point")
    engine = qmc.Sobol(d=d, scramble=False)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # non power-of-two draw
        pts = engine.random(n + 1 if skip_zero else n)
    return pts[1:] if skip_zero else pts


def sobol_box(n: int, lower: np.ndarray, upper: np.ndarray, skip_zero: bool = True) -> np.ndarray:
    """Sobol points affinely mapped into a box."""
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    return lower + sobol_unit(n, lower.size, skip_zero) * (upper - lower)
