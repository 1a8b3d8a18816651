"""Expected improvement acquisition and batch query-point selection.

Batch members are chosen one at a time by maximizing EI against a GP that is
conditioned, with frozen hyperparameters, on surrogate values at the points
already picked: the predictive mean when it is worse than the incumbent, the
incumbent otherwise. This combines the Kriging Believer and Constant Liar
heuristics and avoids the batch collapsing onto a single query point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

from simcal.gp import GPEmulator, SingularUpdateError
from simcal.qmc import sobol_unit

_SIGMA_FLOOR = 1e-12


class BatchSelectionError(RuntimeError):
    """No batch point could be selected (covariance singular at the start)."""


@dataclass(frozen=True)
class SearchBox:
    """Axis-aligned box constraint for the acquisition search."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, float)
        hi = np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("box needs lower < upper componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def contains(self, x) -> bool:
        x = np.asarray(x, float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)


@dataclass(frozen=True)
class Batch:
    """Selected query points with their surrogate targets and selection EIs."""

    points: np.ndarray           # (b, d)
    surrogate_values: np.ndarray
    ei_values: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def _ei_from_moments(mu, sigma, g_best):
    gap = g_best - mu
    out = np.maximum(gap, 0.0)
    ok = sigma >= _SIGMA_FLOOR
    z = np.where(ok, gap / np.where(ok, sigma, 1.0), 0.0)
    ei = gap * special.ndtr(z) + sigma * np.exp(-0.5 * z ** 2) / np.sqrt(2 * np.pi)
    return np.where(ok, np.maximum(ei, 0.0), out)


def expected_improvement(gp: GPEmulator, theta, g_best: float):
    """Closed-form EI of minimizing below ``g_best`` at one point or a batch."""
    single = np.asarray(theta).ndim == 1
    mu, var = gp.predict(theta)
    ei = _ei_from_moments(mu, np.sqrt(var), g_best)
    return float(ei[0]) if single else ei


def ei_gradient(gp: GPEmulator, theta, g_best: float):
    """Analytic EI gradient; zero where the predictive deviation degenerates."""
    single = np.asarray(theta).ndim == 1
    _, grad = _ei_and_gradient(gp, np.atleast_2d(theta), g_best)
    return grad[0] if single else grad


def _ei_and_gradient(gp: GPEmulator, x: np.ndarray, g_best: float):
    mu, var, dmu, dvar = gp.predict_with_gradients(x)
    sigma = np.sqrt(var)
    ok = sigma >= _SIGMA_FLOOR
    safe = np.where(ok, sigma, 1.0)
    z = np.where(ok, (g_best - mu) / safe, 0.0)
    cdf = special.ndtr(z)
    pdf = np.exp(-0.5 * z ** 2) / np.sqrt(2 * np.pi)
    ei = np.where(ok, np.maximum((g_best - mu) * cdf + sigma * pdf, 0.0),
                  np.maximum(g_best - mu, 0.0))
    dsigma = dvar / (2.0 * safe[:, None])
    grad = -cdf[:, None] * dmu + pdf[:, None] * dsigma
    grad = np.where(ok[:, None], grad, 0.0)
    return ei, grad


def multistart_maximize_ei(gp: GPEmulator, g_best: float, box: SearchBox,
                           n_starts: int = 10_000, n_local: int = 512,
                           max_iter: int = 200, grad_tol: float = 1e-8,
                           merge_tol: float = 1e-6) -> list[tuple[np.ndarray, float]]:
    """Locate local maxima of EI inside the box, best first.

    Sobol starts are ranked by EI and only the best ``n_local`` are polished
    with projected gradient ascent (backtracking step control); maxima closer
    than ``merge_tol`` in box-scaled coordinates are merged. Never empty: the
    best Sobol start survives even if every ascent stalls.
    """
    width = box.width
    starts = box.lower + sobol_unit(n_starts, box.dim) * width
    ei0 = expected_improvement(gp, starts, g_best)
    order = np.argsort(ei0)[::-1]
    keep = order[:min(n_local, n_starts)]
    pts = starts[keep].copy()
    best_start = (starts[order[0]].copy(), float(ei0[order[0]]))

    ei, grad = _ei_and_gradient(gp, pts, g_best)
    step = np.full(len(pts), 0.25)
    active = np.ones(len(pts), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.where(active)[0]
        gz = grad[idx] * width                     # ascent in box-scaled coords
        gnorm = np.linalg.norm(gz, axis=1)
        stalled = gnorm < grad_tol
        active[idx[stalled]] = False
        idx = idx[~stalled]
        if idx.size == 0:
            break
        gz = gz[~stalled]
        gdir = gz / np.linalg.norm(gz, axis=1, keepdims=True)
        cand = box.clip(pts[idx] + (step[idx, None] * gdir) * width)
        cand_ei, cand_grad = _ei_and_gradient(gp, cand, g_best)
        better = cand_ei > ei[idx]
        adv = idx[better]
        pts[adv] = cand[better]
        ei[adv] = cand_ei[better]
        grad[adv] = cand_grad[better]
        step[adv] = np.minimum(step[adv] * 1.5, 0.5)
        worse = idx[~better]
        step[worse] *= 0.5
        active[worse[step[worse] < 1e-12]] = False

    # merge duplicates in scaled coordinates
    scaled = (pts - box.lower) / width
    order = np.argsort(ei)[::-1]
    maxima: list[tuple[np.ndarray, float]] = []
    chosen_scaled: list[np.ndarray] = []
    for i in order:
        if any(np.linalg.norm(scaled[i] - c) < merge_tol for c in chosen_scaled):
            continue
        chosen_scaled.append(scaled[i])
        maxima.append((pts[i].copy(), float(ei[i])))
    if not maxima or maxima[0][1] < best_start[1]:
        maxima.insert(0, best_start)
    return maxima


def batch_select(gp: GPEmulator, g_best: float, box: SearchBox,
                 n_batch: int = 20, min_separation: float = 1e-8,
                 **ms_kwargs) -> Batch:
    """Select up to ``n_batch`` query points by sequential conditioned-EI.

    The surrogate target for each selected point is max(predictive mean,
    incumbent). Selection stops early with a smaller batch if conditioning on
    another point would make the covariance numerically singular.
    """
    cur = gp
    width = box.width
    points, surrogates, eis = [], [], []
    for i in range(n_batch):
        maxima = multistart_maximize_ei(cur, g_best, box, **ms_kwargs)
        chosen = None
        for x, ei in maxima:
            d_train = np.linalg.norm((cur.inputs - x) / width, axis=1).min()
            if d_train > min_separation:
                chosen = (x, ei)
                break
        if chosen is None:
            if i == 0:
                raise BatchSelectionError("every EI maximum coincides with training data")
            break
        x, ei = chosen
        mu, _ = cur.predict_scalar(x)
        surrogate = max(mu, g_best)
        try:
            cur = cur.condition(x, surrogate)
        except SingularUpdateError:
            if i == 0:
                raise BatchSelectionError("covariance singular before first batch point")
            break
        points.append(x)
        surrogates.append(surrogate)
        eis.append(ei)
    return Batch(points=np.asarray(points), surrogate_values=np.asarray(surrogates),
                 ei_values=np.asarray(eis))
