"""Two-phase batch Bayesian optimization driver for the posterior mode search.

Phase one minimizes the log of the (shifted) negative log posterior over a
wide prior-derived box; after convergence the search space is constrained to
the bounding cube of the non-implausible region (points plausibly inside the
90% highest-posterior-density set), and phase two minimizes the negative log
posterior itself inside the constrained box. A finite-difference Laplace
approximation at the mode then drives an eigen-aligned space-filling design,
and the final emulator is fitted on everything retained.
"""

from __future__ import annotations

import concurrent.futures
import csv
import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import special, stats

from simcal import gp as gpmod
from simcal.acquisition import (Batch, BatchSelectionError, SearchBox,
                                batch_select)
from simcal.data_model import CalibrationDataset, ParameterVector
from simcal.likelihood import NoiseModel, ObjectivePhase, PriorSpec, neg_log_posterior
from simcal.qmc import sobol_box, sobol_unit


class RunAbortedError(RuntimeError):
    """Calibration aborted (too many simulator failures in one batch)."""


class LaplaceError(RuntimeError):
    """Mode Hessian not positive definite within the allowed jitter budget."""


@dataclass(frozen=True)
class BOConfig:
    """Budget, convergence and constraining settings for the BO driver."""

    n_init: int = 50
    n_batch: int = 20
    n_itermin: int = 5
    n_itermax: int = 100
    eps_theta: float = 1e-2
    eps_g: float = 1e-2
    eps_ei: float = 1e-3
    truncation_gap: float = 10.0
    hpd_p_constrain: float = 0.90
    hpd_prob_min: float = 0.05
    hpd_p_buffer: float = 0.995
    n_constr: int = 100_000
    n_spfill: int = 500
    n_polish: int = 400             # exact-objective mode refinement; 0 disables
    r_spfill: float | None = None   # default: 0.5 * chi2_inv(0.99, d)
    seed: int = 0
    # acquisition effort (paper-scale defaults; reduce for cheap objectives)
    n_ei_starts: int = 10_000
    n_ei_local: int = 512
    gp_multistarts: int = 8

    def __post_init__(self):
        if min(self.n_init, self.n_batch, self.n_itermin, self.n_itermax,
               self.n_constr, self.n_spfill) < 1:
            raise ValueError("budgets must be positive")
        for p in (self.hpd_p_constrain, self.hpd_prob_min, self.hpd_p_buffer):
            if not 0 < p < 1:
                raise ValueError("HPD probabilities must lie in (0, 1)")
        if min(self.eps_theta, self.eps_g, self.eps_ei, self.truncation_gap) <= 0:
            raise ValueError("tolerances must be positive")
        if self.n_polish < 0:
            raise ValueError("n_polish must be non-negative")


@dataclass(frozen=True)
class QueryEntry:
    theta: np.ndarray
    g_neglog: float
    phase: str
    batch_index: int


@dataclass
class QueryLog:
    """Append-only record of evaluated points; failures are kept separately."""

    names: tuple[str, ...]
    entries: list[QueryEntry] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)

    def append(self, theta, g_neglog: float, phase: str, batch_index: int):
        if not math.isfinite(g_neglog):
            raise ValueError("objective value must be finite")
        self.entries.append(QueryEntry(np.asarray(theta, float), float(g_neglog),
                                       phase, batch_index))

    def record_failure(self, theta, phase: str, batch_index: int, message: str):
        self.failures.append({"theta": np.asarray(theta, float).tolist(),
                              "phase": phase, "batch_index": batch_index,
                              "error": message})

    def thetas(self) -> np.ndarray:
        return np.array([e.theta for e in self.entries])

    def values(self) -> np.ndarray:
        return np.array([e.g_neglog for e in self.entries])

    def incumbent(self) -> tuple[np.ndarray, float]:
        i = int(np.argmin(self.values()))
        return self.entries[i].theta, self.entries[i].g_neglog

    def __len__(self) -> int:
        return len(self.entries)

    def write_csv(self, path):
        tmp = str(path) + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([*self.names, "g_neglog", "phase", "batch"])
            for e in self.entries:
                writer.writerow([*(f"{v:.17g}" for v in e.theta),
                                 f"{e.g_neglog:.17g}", e.phase, e.batch_index])
        os.replace(tmp, path)

    @staticmethod
    def read_csv(path, names) -> "QueryLog":
        log = QueryLog(tuple(names))
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                theta = [float(row[n]) for n in names]
                log.append(theta, float(row["g_neglog"]), row["phase"], int(row["batch"]))
        return log


@dataclass(frozen=True)
class LaplaceApprox:
    """Gaussian approximation of the posterior at the emulated mode."""

    mode: np.ndarray
    cov: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    jitter: float

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode.tolist(), "cov": self.cov.tolist(),
                           "eigvecs": self.eigvecs.tolist(),
                           "eigvals": self.eigvals.tolist(), "jitter": self.jitter})

    @staticmethod
    def from_json(text: str) -> "LaplaceApprox":
        o = json.loads(text)
        return LaplaceApprox(np.asarray(o["mode"]), np.asarray(o["cov"]),
                             np.asarray(o["eigvecs"]), np.asarray(o["eigvals"]),
                             o["jitter"])


@dataclass(frozen=True)
class ObjectiveEvaluator:
    """Picklable negative-log-posterior evaluator used by worker processes."""

    simulator: object
    ds: CalibrationDataset
    prior: PriorSpec
    noise: NoiseModel

    def __call__(self, theta: np.ndarray) -> float:
        pv = ParameterVector.from_array(theta, self.prior.names)
        out = self.simulator.evaluate(pv.natural(), 1.0)
        return neg_log_posterior(pv, self.ds, out, self.prior, self.noise)


def _eval_one(evaluator, theta):
    try:
        return float(evaluator(np.asarray(theta, float))), None
    except Exception as exc:  # failure is data, not a crash of the run
        return None, f"{type(exc).__name__}: {exc}"


def evaluate_points(evaluator, thetas, jobs: int = 1, executor=None):
    """Evaluate the objective at several points, preserving input order."""
    thetas = [np.asarray(t, float) for t in thetas]
    if executor is not None:
        return list(executor.map(_eval_one, [evaluator] * len(thetas), thetas))
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_eval_one, [evaluator] * len(thetas), thetas))
    return [_eval_one(evaluator, t) for t in thetas]


def initial_design(prior: PriorSpec, n_init: int, seed: int = 0) -> np.ndarray:
    """Sobol design over the prior mean +- four prior standard deviations."""
    mu = np.asarray(prior.means)
    sd = np.asarray(prior.stds)
    return sobol_box(n_init, mu - 4.0 * sd, mu + 4.0 * sd)


def initial_box(prior: PriorSpec, margin: float = 4.4) -> SearchBox:
    """Initial BO limits, slightly larger than the initial design hypercube."""
    mu = np.asarray(prior.means)
    sd = np.asarray(prior.stds)
    return SearchBox(mu - margin * sd, mu + margin * sd)


def truncate_targets(g: np.ndarray, g_best: float, gap: float = 10.0) -> np.ndarray:
    """Cap objective values at incumbent + gap before GP fitting."""
    return np.minimum(np.asarray(g, float), g_best + gap)


def check_convergence(thetas: np.ndarray, g_values: np.ndarray, n_batches: int,
                      last_batch_eis: np.ndarray, cfg: BOConfig) -> tuple[bool, str]:
    """Convergence decision from the two best points, batch EIs and budget."""
    if n_batches < cfg.n_itermin:
        return False, "below minimum batch count"
    if n_batches >= cfg.n_itermax:
        return True, "iteration budget exhausted"
    order = np.argsort(g_values)
    if len(order) >= 2:
        b0, b1 = order[0], order[1]
        if (np.linalg.norm(thetas[b1] - thetas[b0]) <= cfg.eps_theta
                and abs(g_values[b1] - g_values[b0]) <= cfg.eps_g):
            return True, "two best points coincide"
    if len(last_batch_eis) and np.all(np.asarray(last_batch_eis) <= cfg.eps_ei):
        return True, "expected improvement exhausted"
    return False, "not converged"


@dataclass
class PhaseResult:
    log: QueryLog
    emulator: gpmod.GPEmulator
    incumbent_theta: np.ndarray
    incumbent_neglog: float
    offset: float
    n_batches: int
    reason: str


def _phase_targets(neglogs: np.ndarray, phase: ObjectivePhase, offset: float) -> np.ndarray:
    if phase is ObjectivePhase.NEG_LOG:
        return neglogs.copy()
    return np.log(neglogs + offset)


def run_phase(evaluator, prior: PriorSpec, phase: ObjectivePhase, box: SearchBox,
              cfg: BOConfig, log: QueryLog, phase_tag: str,
              jobs: int = 1, executor=None, checkpoint=None) -> PhaseResult:
    """One BO stage: fit emulator, select a batch, evaluate, until converged.

    ``log`` may already hold warm-start evaluations (phase two); when empty
    the initial Sobol design is evaluated first. The returned emulator is
    fitted on all retained evaluations of this phase.
    """
    if len(log) == 0:
        design = initial_design(prior, cfg.n_init, cfg.seed)
        results = evaluate_points(evaluator, design, jobs, executor)
        for theta, (val, err) in zip(design, results):
            if err is None:
                log.append(theta, val, f"{phase_tag}-init", 0)
            else:
                log.record_failure(theta, f"{phase_tag}-init", 0, err)
        if len(log) < 2:
            raise RunAbortedError("initial design produced fewer than two valid points")

    offset = 0.0
    if phase is ObjectivePhase.LOG_MINUS_LOG:
        offset = max(0.0, 1.0 - float(log.values().min()))

    emulator = None
    warm = None
    converged = False
    reason = "not converged"
    n_batches = 0
    while True:
        thetas = log.thetas()
        g = _phase_targets(log.values(), phase, offset)
        g_best = float(g.min())
        targets = truncate_targets(g, g_best, cfg.truncation_gap)
        emulator = gpmod.fit(thetas, targets, box.lower, box.upper,
                             n_starts=cfg.gp_multistarts if warm is None else 1,
                             warm=warm)
        warm = emulator.hyper
        if converged or n_batches >= cfg.n_itermax:
            break
        try:
            batch = batch_select(emulator, g_best, box, cfg.n_batch,
                                 n_starts=cfg.n_ei_starts, n_local=cfg.n_ei_local)
        except BatchSelectionError:
            # every EI maximum already coincides with evaluated points: the
            # acquisition has nothing left to propose, which is convergence
            reason = "expected improvement exhausted"
            break
        results = evaluate_points(evaluator, batch.points, jobs, executor)
        n_batches += 1
        n_failed = sum(1 for _, err in results if err is not None)
        for theta, (val, err) in zip(batch.points, results):
            if err is None:
                log.append(theta, val, phase_tag, n_batches)
            else:
                log.record_failure(theta, phase_tag, n_batches, err)
        if n_failed * 2 > len(batch):
            raise RunAbortedError(
                f"{n_failed}/{len(batch)} simulator failures in batch {n_batches}")
        g_all = _phase_targets(log.values(), phase, offset)
        converged, reason = check_convergence(log.thetas(), g_all, n_batches,
                                              batch.ei_values, cfg)
        if checkpoint is not None:
            checkpoint(log)

    theta_hat, neglog_hat = log.incumbent()
    return PhaseResult(log=log, emulator=emulator, incumbent_theta=theta_hat,
                       incumbent_neglog=neglog_hat, offset=offset,
                       n_batches=n_batches, reason=reason)


def emulator_mode(gp: gpmod.GPEmulator, box: SearchBox,
                  n_starts: int = 8) -> tuple[np.ndarray, float]:
    """Minimize the emulator predictive mean inside the box (gradient-based).

    Started from the best training points; returns the refined mode and its
    emulated objective value.
    """
    from scipy import optimize

    mu_train, _ = gp.predict(gp.inputs)
    order = np.argsort(mu_train)
    starts = [gp.inputs[i] for i in order[:n_starts]
              if box.contains(gp.inputs[i])]
    if not starts:
        starts = [box.clip(gp.inputs[order[0]])]
    best_x, best_f = None, np.inf
    bounds = list(zip(box.lower, box.upper))
    for x0 in starts:
        res = optimize.minimize(
            lambda x: (float(gp.predict(np.atleast_2d(x))[0][0]),
                       gp.predict_mean_gradient(x)),
            x0, jac=True, method="L-BFGS-B", bounds=bounds)
        if res.fun < best_f:
            best_x, best_f = res.x, float(res.fun)
    return best_x, best_f


def polish_mode(evaluator, starts, box: SearchBox, log: QueryLog,
                budget: int, batch_index: int) -> tuple[np.ndarray, float]:
    """Local simplex refinement of the incumbent on the exact objective.

    Expected improvement goes quiet once the emulator believes the surface is
    flat, which can happen a few nats above the true minimum of a shallow
    basin; a short derivative-free descent on the exact objective closes that
    gap. Every evaluation is clipped to the box and appended to the log, so
    the subsequent emulator refit sees the whole descent path.
    """
    from scipy import optimize

    seen = {tuple(e.theta) for e in log.entries}
    cache: dict[tuple, float] = {}
    spent = 0

    def f(x):
        nonlocal spent
        x = box.clip(np.asarray(x, float))
        key = tuple(x)
        if key in cache:
            return cache[key]
        val, err = _eval_one(evaluator, x)
        spent += 1
        if err is not None:
            log.record_failure(x, "polish", batch_index, err)
            val = np.inf
        elif key not in seen:
            log.append(x, val, "polish", batch_index)
            seen.add(key)
        cache[key] = val
        return val

    best_x, best_f = None, np.inf
    for x0 in starts:
        if spent >= budget:
            break
        res = optimize.minimize(f, box.clip(np.asarray(x0, float)),
                                method="Nelder-Mead",
                                options=dict(maxfev=budget - spent,
                                             xatol=1e-4, fatol=1e-4))
        x, fx = box.clip(res.x), float(res.fun)
        if fx < best_f:
            best_x, best_f = x, fx
    if best_x is None or not np.isfinite(best_f):
        theta_hat, neglog_hat = log.incumbent()
        return theta_hat, neglog_hat
    return best_x, best_f


def hpd_threshold(g_hat_neglog: float, p: float, d: int) -> float:
    """Negative-log-posterior level bounding the probability-p HPD region."""
    return g_hat_neglog + 0.5 * float(stats.chi2.ppf(p, d))


def hpd_probability(gp: gpmod.GPEmulator, theta, g_hat_neglog: float, p: float,
                    d: int, threshold_transform=None):
    """Emulator-based probability that theta lies inside the p-HPD region."""
    thr = hpd_threshold(g_hat_neglog, p, d)
    if threshold_transform is not None:
        thr = threshold_transform(thr)
    single = np.asarray(theta).ndim == 1
    mu, var = gp.predict(theta)
    sigma = np.sqrt(var)
    with np.errstate(divide="ignore"):
        z = np.where(sigma > 0, (thr - mu) / np.where(sigma > 0, sigma, 1.0),
                     np.where(mu <= thr, np.inf, -np.inf))
    pr = special.ndtr(z)
    return float(pr[0]) if single else pr


def constrain_box(gp: gpmod.GPEmulator, g_hat_neglog: float, box: SearchBox,
                  cfg: BOConfig, threshold_transform=None,
                  ) -> tuple[SearchBox, SearchBox, bool]:
    """Bounding cubes of the non-implausible points for search and retention.

    Probes the box with quasi-random points; the constrained box bounds the
    points plausibly inside the 90% HPD region, the buffer box those plausibly
    inside the 99.5% region. Returns (constrained, buffer, fallback_flag);
    with the flag set no non-implausible point was found and a minimum-width
    cube around the incumbent is substituted.
    """
    d = box.dim
    probes = sobol_box(cfg.n_constr, box.lower, box.upper)
    keep_c = np.zeros(len(probes), dtype=bool)
    keep_b = np.zeros(len(probes), dtype=bool)
    for start in range(0, len(probes), 4096):
        chunk = probes[start:start + 4096]
        pr_c = hpd_probability(gp, chunk, g_hat_neglog, cfg.hpd_p_constrain, d,
                               threshold_transform)
        pr_b = hpd_probability(gp, chunk, g_hat_neglog, cfg.hpd_p_buffer, d,
                               threshold_transform)
        keep_c[start:start + 4096] = pr_c >= cfg.hpd_prob_min
        keep_b[start:start + 4096] = pr_b >= cfg.hpd_prob_min
    fallback = not keep_c.any()
    if fallback:
        mu_best = probes[np.argmax(hpd_probability(
            gp, probes[:4096], g_hat_neglog, cfg.hpd_p_constrain, d, threshold_transform))]
        lo = mu_best - cfg.eps_theta
        hi = mu_best + cfg.eps_theta
        constrained = SearchBox(lo, hi)
    else:
        pts = probes[keep_c]
        constrained = SearchBox(pts.min(0), pts.max(0))
    if keep_b.any():
        pts_b = probes[keep_b | keep_c] if not fallback else probes[keep_b]
        buffer_box = SearchBox(np.minimum(pts_b.min(0), constrained.lower),
                               np.maximum(pts_b.max(0), constrained.upper))
    else:
        buffer_box = constrained
    return constrained, buffer_box, fallback


def laplace_at_mode(gp: gpmod.GPEmulator, theta_hat: np.ndarray,
                    step_scaled: float = 1e-3) -> LaplaceApprox:
    """Invert the finite-difference Hessian of the emulator mean at the mode.

    The step escalates while the Hessian is indefinite: a densely sampled
    emulator mean carries small-scale wiggle that a wider stencil averages
    out. If no step yields positive definiteness, the most nearly definite
    Hessian is repaired by flooring its eigenvalues, which widens the
    approximation along the directions whose curvature the emulator cannot
    resolve instead of failing the run.
    """
    theta_hat = np.asarray(theta_hat, float)
    d = theta_hat.size

    def mean(x):
        return gp.predict(np.atleast_2d(x))[0]

    def fd_hessian(step: float) -> np.ndarray:
        h = step * 0.5 * (gp.box_upper - gp.box_lower)
        hess = np.zeros((d, d))
        f0 = float(mean(theta_hat)[0])
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h[i]
            fp = float(mean(theta_hat + ei)[0])
            fm = float(mean(theta_hat - ei)[0])
            hess[i, i] = (fp - 2.0 * f0 + fm) / h[i] ** 2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = h[j]
                fpp = float(mean(theta_hat + ei + ej)[0])
                fpm = float(mean(theta_hat + ei - ej)[0])
                fmp = float(mean(theta_hat - ei + ej)[0])
                fmm = float(mean(theta_hat - ei - ej)[0])
                hess[i, j] = hess[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j])
        return hess

    best_hess, best_min = None, -np.inf
    for step in (step_scaled, 3.0 * step_scaled, 10.0 * step_scaled,
                 30.0 * step_scaled):
        hess = fd_hessian(step)
        lo = float(np.linalg.eigvalsh(hess).min())
        if lo > best_min:
            best_hess, best_min = hess, lo
        if lo > 0.0:
            break

    eigvals_h, eigvecs_h = np.linalg.eigh(best_hess)
    top = float(eigvals_h.max())
    if not np.isfinite(top) or top <= 0.0:
        raise LaplaceError(
            "no positive curvature at the mode; run more BO iterations")
    floor = 1e-4 * top
    clipped = np.maximum(eigvals_h, floor)
    jitter = 0.0 if best_min >= floor else floor
    cov = (eigvecs_h / clipped) @ eigvecs_h.T
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    if np.any(eigvals <= 0):
        raise LaplaceError("Laplace covariance not positive definite")
    return LaplaceApprox(mode=theta_hat, cov=cov, eigvecs=eigvecs,
                         eigvals=eigvals, jitter=jitter)


def default_r_spfill(d: int) -> float:
    return 0.5 * float(stats.chi2.ppf(0.99, d))


def space_filling_design(la: LaplaceApprox, n_spfill: int,
                         r_spfill: float | None = None, seed: int = 0) -> np.ndarray:
    """Sobol design in [-1,1]^d stretched along the Laplace eigenstructure."""
    d = la.mode.size
    if r_spfill is None:
        r_spfill = default_r_spfill(d)
    w = 2.0 * sobol_unit(n_spfill, d) - 1.0
    scale = la.eigvecs * np.sqrt(la.eigvals)     # columns V_i * sqrt(lambda_i)
    return la.mode + r_spfill * (w @ scale.T)


@dataclass
class CalibrationResult:
    emulator: gpmod.GPEmulator      # negative-log-posterior scale
    log: QueryLog
    laplace: LaplaceApprox
    mode: np.ndarray
    mode_neglog: float
    constrained_box: SearchBox
    buffer_box: SearchBox
    sampling_box: SearchBox
    initial_boxes: SearchBox
    phase1_offset: float
    fallback_box: bool
    n_batches_phase1: int
    n_batches_phase2: int
    report: str


def _write_atomic(path: Path, text: str):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def calibrate_full(simulator, ds: CalibrationDataset, prior: PriorSpec,
                   noise: NoiseModel, cfg: BOConfig, rundir=None,
                   jobs: int = 1, evaluator=None) -> CalibrationResult:
    """End-to-end mode search, Laplace approximation and final emulator fit.

    If ``rundir`` is given, every stage checkpoints there (queries.csv,
    box.json, laplace.json, emulator.json, report.txt) and a partially
    completed run is resumed from the last finished stage. A custom
    ``evaluator`` (theta -> negative log posterior) replaces the default
    simulator-backed one, e.g. for analytic test objectives.
    """
    if evaluator is None:
        evaluator = ObjectiveEvaluator(simulator, ds, prior, noise)
    box0 = initial_box(prior)
    rundir = Path(rundir) if rundir is not None else None
    state = {}
    if rundir is not None:
        rundir.mkdir(parents=True, exist_ok=True)
        state_path = rundir / "state.json"
        if state_path.exists():
            state = json.loads(state_path.read_text())

    def save_state():
        if rundir is not None:
            _write_atomic(rundir / "state.json", json.dumps(state))

    def checkpoint_log(log):
        if rundir is not None:
            log.write_csv(rundir / "queries.csv")

    # phase 1: log-minus-log posterior over the wide prior box
    log = QueryLog(prior.names)
    if state.get("stage_phase1_done") and rundir is not None:
        log = QueryLog.read_csv(rundir / "queries.csv", prior.names)
        p1_entries = [e for e in log.entries if e.phase.startswith("phase1")]
        p1 = None
        offset1 = state["phase1_offset"]
        n_b1 = state["phase1_batches"]
    else:
        p1 = run_phase(evaluator, prior, ObjectivePhase.LOG_MINUS_LOG, box0, cfg,
                       log, "phase1", jobs=jobs, checkpoint=checkpoint_log)
        offset1 = p1.offset
        n_b1 = p1.n_batches
        state.update({"stage_phase1_done": True, "phase1_offset": offset1,
                      "phase1_batches": n_b1})
        checkpoint_log(log)
        save_state()

    if p1 is None:
        thetas = log.thetas()
        g = _phase_targets(log.values(), ObjectivePhase.LOG_MINUS_LOG, offset1)
        emulator1 = gpmod.fit(thetas, truncate_targets(g, float(g.min()), cfg.truncation_gap),
                              box0.lower, box0.upper, n_starts=cfg.gp_multistarts)
        theta_hat, neglog_hat = log.incumbent()
    else:
        emulator1 = p1.emulator
        theta_hat, neglog_hat = p1.incumbent_theta, p1.incumbent_neglog

    # constrain the search space via the HPD-membership probability
    def to_phase1_scale(thr):
        return math.log(thr + offset1) if thr + offset1 > 0 else -math.inf

    constrained, buffer_box, fallback = constrain_box(
        emulator1, neglog_hat, box0, cfg, threshold_transform=to_phase1_scale)
    if rundir is not None:
        _write_atomic(rundir / "box.json", json.dumps({
            "initial": {"lower": box0.lower.tolist(), "upper": box0.upper.tolist()},
            "constrained": {"lower": constrained.lower.tolist(),
                            "upper": constrained.upper.tolist()},
            "buffer": {"lower": buffer_box.lower.tolist(),
                       "upper": buffer_box.upper.tolist()},
            "fallback": fallback}))

    # phase 2: negative log posterior inside the constrained box, warm-started
    # with the evaluations retained inside the buffer box
    log2 = QueryLog(prior.names)
    inside = [e for e in log.entries
              if np.all(e.theta >= buffer_box.lower) and np.all(e.theta <= buffer_box.upper)]
    for e in inside:
        log2.append(e.theta, e.g_neglog, e.phase, e.batch_index)
    if len(log2) < 2:  # keep at least the incumbent neighbourhood usable
        for e in sorted(log.entries, key=lambda e: e.g_neglog)[:cfg.n_init // 2]:
            if not any(np.array_equal(e.theta, f.theta) for f in log2.entries):
                log2.append(e.theta, e.g_neglog, e.phase, e.batch_index)

    p2 = run_phase(evaluator, prior, ObjectivePhase.NEG_LOG, constrained, cfg,
                   log2, "phase2", jobs=jobs, checkpoint=None)
    theta_hat, _ = emulator_mode(p2.emulator, constrained)
    mode_emulator = p2.emulator
    if cfg.n_polish > 0:
        # local exact-objective descent from the incumbent and the emulator
        # mode: batch EI stalls once the emulator believes the basin is flat,
        # which can leave the incumbent several nats above the true minimum.
        # The descent runs over the wide initial box because the constrained
        # box is emulator-derived and can clip the true mode
        inc_theta, _ = log2.incumbent()
        theta_hat, _ = polish_mode(evaluator, [inc_theta, theta_hat],
                                   box0, log2, cfg.n_polish,
                                   p2.n_batches + 1)
        g2 = log2.values()
        mode_emulator = gpmod.fit(
            log2.thetas(),
            truncate_targets(g2, float(g2.min()), cfg.truncation_gap),
            constrained.lower, constrained.upper,
            n_starts=1, warm=p2.emulator.hyper)

    try:
        laplace = laplace_at_mode(mode_emulator, theta_hat)
    except LaplaceError:
        # the targets are clamped at the truncation cap, and with many
        # batches the clamp kink plus dense clustering can make the mean wiggly
        # enough for an indefinite finite-difference Hessian. Refit on the
        # near-mode points only (unclamped, far field dropped) and retry there
        g2 = log2.values()
        near2 = g2 <= float(g2.min()) + cfg.truncation_gap
        if int(near2.sum()) < prior.dim + 2:
            raise
        near_gp = gpmod.fit(log2.thetas()[near2], g2[near2],
                            constrained.lower, constrained.upper,
                            n_starts=1, warm=mode_emulator.hyper)
        laplace = laplace_at_mode(near_gp, theta_hat)
    if rundir is not None:
        _write_atomic(rundir / "laplace.json", laplace.to_json())

    # space-filling design around the mode, then one final fit
    design = space_filling_design(laplace, cfg.n_spfill, cfg.r_spfill, cfg.seed)
    results = evaluate_points(evaluator, design, jobs)
    for theta, (val, err) in zip(design, results):
        if err is None:
            log2.append(theta, val, "spfill", p2.n_batches + 2)
        else:
            log2.record_failure(theta, "spfill", p2.n_batches + 2, err)

    # truncating the far field keeps the retained wide-box values (which can
    # span orders of magnitude) from dominating the target scale and wrecking
    # near-mode accuracy; it also pins the mean at the cap over unexplored
    # regions instead of letting it extrapolate downward. The cap is the
    # objective range the space-filling design is built to resolve
    # (r^2/2 above the incumbent at Mahalanobis radius r), so the design
    # shell itself is never flattened
    r_fill = cfg.r_spfill if cfg.r_spfill is not None else default_r_spfill(prior.dim)
    gap_final = max(cfg.truncation_gap, 0.5 * r_fill * r_fill)
    g = log2.values()
    targets = truncate_targets(g, float(g.min()), gap_final)
    final = gpmod.fit(log2.thetas(), targets,
                      constrained.lower, constrained.upper,
                      n_starts=cfg.gp_multistarts, warm=p2.emulator.hyper)

    if cfg.n_polish > 0:
        # the exact-objective descent already pinned the mode to within the
        # simplex tolerance, so the best evaluated point is the mode estimate
        theta_hat, neglog_hat = log2.incumbent()
    else:
        # the clamp above leaves a kink at the cap that biases the fitted
        # curvature, so the mode is refined on a separate fit of the near-mode
        # points only (values below the cap, dropped rather than clamped)
        near = g <= float(g.min()) + gap_final
        mode_gp = gpmod.fit(log2.thetas()[near], g[near],
                            constrained.lower, constrained.upper,
                            n_starts=1, warm=final.hyper)
        theta_hat, neglog_hat = emulator_mode(mode_gp, constrained)

    # the sampler must stay where the emulator has data: outside the
    # space-filling design the predictive mean is extrapolation and can dip
    # far below any value ever observed, which the slice sampler would then
    # treat as the posterior bulk. The design spans Mahalanobis radius
    # r_spfill (~7.5), so the true mass outside its bounding box is
    # negligible (< 1e-10 for d=5); the initial box bounds it in directions
    # whose curvature the Laplace approximation could not resolve
    sampling_box = SearchBox(
        np.maximum(box0.lower, design.min(axis=0)),
        np.minimum(box0.upper, design.max(axis=0)))
    if rundir is not None:
        boxes_payload = json.loads((rundir / "box.json").read_text())
        boxes_payload["sampling"] = {"lower": sampling_box.lower.tolist(),
                                     "upper": sampling_box.upper.tolist()}
        _write_atomic(rundir / "box.json", json.dumps(boxes_payload))

    # merge phase-2/spfill evaluations into the master log for the run record
    seen = {tuple(e.theta) for e in log.entries}
    for e in log2.entries:
        if tuple(e.theta) not in seen:
            log.entries.append(e)
    log.failures.extend(log2.failures)

    report_lines = [
        f"phase1: {n_b1} batches, offset C={offset1:.6g}",
        f"phase2: {p2.n_batches} batches ({p2.reason})",
        f"total objective evaluations: {len(log)}",
        f"failures: {len(log.failures)}",
        f"mode (neg log posterior {neglog_hat:.6g}): "
        + ", ".join(f"{n}={v:.6g}" for n, v in zip(prior.names, theta_hat)),
        f"constrained box fallback: {fallback}",
        f"laplace jitter: {laplace.jitter:.3g}",
    ]
    report = "\n".join(report_lines)
    if rundir is not None:
        checkpoint_log(log)
        _write_atomic(rundir / "emulator.json", final.to_json())
        _write_atomic(rundir / "report.txt", report + "\n")
        state.update({"stage_done": True})
        save_state()

    return CalibrationResult(
        emulator=final, log=log, laplace=laplace, mode=theta_hat,
        mode_neglog=neglog_hat, constrained_box=constrained,
        buffer_box=buffer_box, sampling_box=sampling_box,
        initial_boxes=box0, phase1_offset=offset1,
        fallback_box=fallback, n_batches_phase1=n_b1,
        n_batches_phase2=p2.n_batches, report=report)
