"""Posterior sampling from the emulated log posterior.

A single coordinate-wise slice-sampling chain targets the negative of the
emulator predictive mean inside the buffer box, is thinned to approximate
independence, and each retained parameter draw is completed with Gibbs draws
of the per-group noise variances (imputing censored values from truncated
normals). Importance weights against the exact posterior correct for the
emulator error; the simulator outputs produced for the weights are returned
so scenario prediction can reuse them as the business-as-usual runs.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from simcal.data_model import CalibrationDataset, ParameterVector
from simcal.likelihood import NoiseModel, PriorSpec, neg_log_posterior


class SamplingError(RuntimeError):
    """Posterior sampling failed (degenerate weights or unusable chain)."""


def slice_sample(logdensity, start, box, n_raw: int, seed: int = 0,
                 width_frac: float = 0.25, max_stepout: int = 16,
                 max_shrink: int = 100) -> np.ndarray:
    """Coordinate-wise slice sampler with stepping-out and shrinkage.

    The density is treated as -inf outside the box, so the stepping-out
    interval is clamped to it. If shrinkage collapses an interval to nothing
    the coordinate is retried with a fresh vertical level; after repeated
    collapses the coordinate is left unchanged for that sweep.
    """
    rng = np.random.default_rng(seed)
    x = np.asarray(start, float).copy()
    d = x.size
    lo, hi = np.asarray(box.lower, float), np.asarray(box.upper, float)
    if np.any(x < lo) or np.any(x > hi):
        raise ValueError("start must lie inside the box")
    fx = float(logdensity(x))
    if not math.isfinite(fx):
        raise ValueError("log density must be finite at the start point")
    widths = width_frac * (hi - lo)

    def logf(xi, i, xvec):
        if xi < lo[i] or xi > hi[i]:
            return -np.inf
        old = xvec[i]
        xvec[i] = xi
        val = float(logdensity(xvec))
        xvec[i] = old
        return val

    out = np.empty((n_raw, d))
    for t in range(n_raw):
        for i in range(d):
            x0 = x[i]
            for _attempt in range(3):
                level = fx + math.log(rng.uniform())
                w = widths[i]
                left = max(x0 - w * rng.uniform(), lo[i])
                right = min(left + w, hi[i])
                j = 0
                while left > lo[i] and logf(left, i, x) > level and j < max_stepout:
                    left = max(left - w, lo[i])
                    j += 1
                j = 0
                while right < hi[i] and logf(right, i, x) > level and j < max_stepout:
                    right = min(right + w, hi[i])
                    j += 1
                accepted = False
                for _ in range(max_shrink):
                    xi = left + (right - left) * rng.uniform()
                    fxi = logf(xi, i, x)
                    if fxi > level:
                        x[i] = xi
                        fx = fxi
                        accepted = True
                        break
                    if xi < x0:
                        left = xi
                    else:
                        right = xi
                    if right - left < 1e-14 * widths[i]:
                        break
                if accepted:
                    break
            if not accepted:   # collapse: keep the current coordinate
                x[i] = x0
                fx = float(logdensity(x))
        out[t] = x
    return out


def lag1_autocorr(x: np.ndarray) -> float:
    """Lag-1 autocorrelation of a one-dimensional series (0 for constant)."""
    x = np.asarray(x, float)
    x = x - x.mean()
    denom = float(x @ x)
    if denom <= 0:
        return 0.0
    return float(x[:-1] @ x[1:]) / denom


def thin(chain: np.ndarray, n_mcmc: int = 200) -> np.ndarray:
    """Keep every ``floor(len/n_mcmc)``-th state, ending near the chain's end.

    A warning carrying the measured value is emitted for every coordinate of
    the thinned set whose lag-1 autocorrelation exceeds 0.1.
    """
    chain = np.atleast_2d(np.asarray(chain, float))
    if chain.shape[0] < n_mcmc:
        raise ValueError(f"chain of length {chain.shape[0]} too short for {n_mcmc} samples")
    stride = chain.shape[0] // n_mcmc
    thinned = chain[stride - 1::stride][:n_mcmc]
    for i in range(thinned.shape[1]):
        rho = lag1_autocorr(thinned[:, i])
        if rho > 0.1:
            warnings.warn(f"thinned coordinate {i} lag-1 autocorrelation {rho:.3f} > 0.1",
                          stacklevel=2)
    return thinned


def sample_sigma2(eps: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> float:
    """One draw from the conjugate scaled inverse chi-squared noise posterior."""
    eps = np.asarray(eps, float)
    if not np.all(np.isfinite(eps)):
        raise ValueError("residuals must be finite")
    n = eps.size
    nu = noise.nu0 + n
    s2 = (noise.nu0 * noise.tau0_sq + float(eps @ eps)) / nu
    return nu * s2 / rng.chisquare(nu)


def _truncnorm_below(f, a, sigma, rng):
    """Inverse-CDF draws from Normal(f, sigma^2) truncated to (-inf, a].

    Computed entirely in log space so extreme truncation (a far below f)
    stays finite: y = f + sigma * Phi^{-1}(u * Phi((a - f)/sigma)).
    """
    f = np.asarray(f, float)
    a = np.asarray(a, float)
    log_u = np.log(rng.uniform(size=f.shape))
    log_cap = special.log_ndtr((a - f) / sigma)
    y = f + sigma * special.ndtri_exp(log_u + log_cap)
    return np.minimum(y, a)


def gibbs_censored(f_c: np.ndarray, bounds: np.ndarray, eps_p: np.ndarray,
                   noise: NoiseModel, iters: int = 50,
                   rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Gibbs sweep over one group's noise variance and censored values.

    Alternates truncated-normal imputation of the censored values (standard
    deviation sigma) with a conjugate noise-variance draw from the combined
    residuals, returning the final state.
    """
    if iters < 10:
        raise ValueError("need at least 10 Gibbs iterations")
    if rng is None:
        rng = np.random.default_rng()
    f_c = np.asarray(f_c, float)
    bounds = np.asarray(bounds, float)
    eps_p = np.asarray(eps_p, float)
    if f_c.size == 0:
        return sample_sigma2(eps_p, noise, rng), np.empty(0)
    sigma2 = sample_sigma2(eps_p, noise, rng)
    y_c = f_c.copy()
    for _ in range(iters):
        y_c = _truncnorm_below(f_c, bounds, math.sqrt(sigma2), rng)
        combined = np.concatenate([eps_p, y_c - f_c])
        sigma2 = sample_sigma2(combined, noise, rng)
    return sigma2, y_c


def importance_weights(gp_neglog: np.ndarray, exact_neglog: np.ndarray,
                       ) -> tuple[np.ndarray, float]:
    """Mean-one importance weights of samples drawn from the emulated posterior.

    ``w_s`` is proportional to exp(emulated neg-log - exact neg-log); returns
    the weights and the effective sample size n/(1 + var(w)).
    """
    mu = np.asarray(gp_neglog, float)
    ex = np.asarray(exact_neglog, float)
    if mu.shape != ex.shape or mu.size == 0:
        raise ValueError("need matching non-empty neg-log arrays")
    with np.errstate(invalid="ignore"):
        log_w = mu - ex
    finite = np.isfinite(log_w)
    if not finite.any():
        raise SamplingError("all importance weights are zero or non-finite")
    log_w = np.where(finite, log_w, -np.inf)
    w = np.exp(log_w - log_w[finite].max())
    mean = w.mean()
    if mean <= 0:
        raise SamplingError("importance weights sum to zero")
    w = w / mean
    ess = w.size / (1.0 + float(np.var(w)))
    return w, ess


@dataclass
class PosteriorSamples:
    """Thinned posterior draws with noise variances and importance weights."""

    names: tuple[str, ...]
    thetas: np.ndarray                        # (n, d)
    sigma2: dict[tuple[int, str], np.ndarray]  # (layer, variable) -> (n,)
    weights: np.ndarray
    ess: float
    stride: int
    n_raw: int
    autocorr: dict[str, float] = field(default_factory=dict)
    gp_neglog: np.ndarray | None = None
    exact_neglog: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.thetas)

    def write_csv(self, path):
        import csv as _csv
        group_keys = sorted(self.sigma2, key=lambda jk: (jk[0], jk[1]))
        with open(path, "w", newline="") as fh:
            writer = _csv.writer(fh)
            writer.writerow([*self.names,
                             *(f"sigma2_{j}_{k}" for j, k in group_keys), "weight"])
            for i in range(len(self)):
                writer.writerow([*(f"{v:.17g}" for v in self.thetas[i]),
                                 *(f"{self.sigma2[jk][i]:.17g}" for jk in group_keys),
                                 f"{self.weights[i]:.17g}"])

    def diagnostics(self) -> dict:
        return {"n_mcmc": len(self), "n_raw": self.n_raw, "stride": self.stride,
                "ess": self.ess, "lag1_autocorr": self.autocorr}

    def write_diagnostics(self, path):
        with open(path, "w") as fh:
            json.dump(self.diagnostics(), fh, indent=2)


def sample_posterior(gp, box, n_mcmc: int = 200, seed: int = 0,
                     start: np.ndarray | None = None) -> tuple[np.ndarray, int, int]:
    """Thinned draws of theta from the emulated posterior inside the box.

    Runs a raw chain of 100 x n_mcmc states from the box-constrained slice
    sampler on the negative predictive mean, discards the first 10% as
    burn-in, and thins the rest. Returns (thetas, stride, raw length).
    """
    if start is None:
        start = 0.5 * (np.asarray(box.lower) + np.asarray(box.upper))
    start = np.asarray(start, float)

    def logdensity(x):
        mu, _ = gp.predict(np.atleast_2d(x))
        return -float(mu[0])

    n_raw = 100 * n_mcmc
    chain = slice_sample(logdensity, start, box, n_raw, seed=seed)
    kept = chain[n_raw // 10:]
    stride = len(kept) // n_mcmc
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        thinned = thin(kept, n_mcmc)
    for w in caught:
        warnings.warn(str(w.message), stacklevel=2)
    return thinned, stride, n_raw


def complete_samples(thetas: np.ndarray, simulator, ds: CalibrationDataset,
                     prior: PriorSpec, noise: NoiseModel, gp,
                     seed: int = 0, stride: int = 0, n_raw: int = 0,
                     gibbs_iters: int = 50) -> tuple[PosteriorSamples, list]:
    """Noise variances, importance weights and diagnostics for thinned draws.

    Runs the simulator once per draw for the exact posterior density; the
    outputs are returned alongside so downstream scenario prediction can
    reuse them as the business-as-usual ensemble. Each sample owns an
    independent seed-derived random stream, so the per-sample Gibbs draws are
    reproducible regardless of evaluation order.
    """
    thetas = np.atleast_2d(np.asarray(thetas, float))
    n = len(thetas)
    names = tuple(prior.names)
    sigma2 = {jk: np.empty(n) for jk in ds.groups}
    exact = np.empty(n)
    outputs = []
    for s in range(n):
        pv = ParameterVector.from_array(thetas[s], names)
        out = simulator.evaluate(pv.natural(), 1.0)
        outputs.append(out)
        exact[s] = neg_log_posterior(pv, ds, out, prior, noise)
        rng = np.random.default_rng([seed, s])
        aligned = ds.align(out)
        for jk in ds.groups:
            eps, gaps = aligned[jk]
            if gaps.size:
                # standardized scale: prediction enters the truncated normal
                # at 0, the bound at its gap
                s2, _ = gibbs_censored(np.zeros(gaps.size), gaps, eps, noise,
                                       iters=gibbs_iters, rng=rng)
            else:
                s2 = sample_sigma2(eps, noise, rng)
            sigma2[jk][s] = s2

    mu, _ = gp.predict(thetas)
    weights, ess = importance_weights(mu, exact)
    autocorr = {names[i]: lag1_autocorr(thetas[:, i]) for i in range(thetas.shape[1])}
    samples = PosteriorSamples(names=names, thetas=thetas, sigma2=sigma2,
                               weights=weights, ess=ess, stride=stride,
                               n_raw=n_raw, autocorr=autocorr,
                               gp_neglog=mu, exact_neglog=exact)
    return samples, outputs
