"""Gaussian process emulator of the scalar optimization objective.

The covariance is a sum of an isotropic Matern 5/2, an ARD Matern 5/2, and a
kernel induced by a quadratic polynomial mean with Gaussian coefficient
priors. Hyperparameters are fitted by MAP (marginal likelihood plus
hyperpriors) with deterministic multi-starts; objective evaluations are
treated as exact, so no noise level is fitted and the nugget is pure jitter.

Inputs are affinely mapped to [-1, 1]^d from the current search box and
targets are centered and scaled before kernel evaluation; all public
predictions are on the original scales.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg, optimize

SQRT5 = math.sqrt(5.0)


class SingularUpdateError(RuntimeError):
    """Conditioning on a new point would make the covariance numerically singular."""


class FitError(RuntimeError):
    """Hyperparameter fitting failed beyond jitter escalation."""


@dataclass(frozen=True)
class GPHyperparams:
    """Covariance hyperparameters on the scaled input/target space."""

    iso_magnitude_sq: float
    iso_lengthscale: float
    ard_magnitude_sq: float
    ard_lengthscales: tuple[float, ...]
    quad_coeff_vars: tuple[float, float, float]
    nugget: float

    def __post_init__(self):
        vals = (self.iso_magnitude_sq, self.iso_lengthscale, self.ard_magnitude_sq,
                *self.ard_lengthscales, *self.quad_coeff_vars, self.nugget)
        if not all(v > 0 and math.isfinite(v) for v in vals):
            raise ValueError("all hyperparameters must be finite and positive")

    def pack_log(self) -> np.ndarray:
        return np.log(np.concatenate((
            [self.iso_magnitude_sq, self.iso_lengthscale, self.ard_magnitude_sq],
            self.ard_lengthscales, self.quad_coeff_vars)))

    @staticmethod
    def unpack_log(p: np.ndarray, nugget: float) -> "GPHyperparams":
        v = np.exp(p)
        d = len(p) - 6
        return GPHyperparams(
            iso_magnitude_sq=float(v[0]), iso_lengthscale=float(v[1]),
            ard_magnitude_sq=float(v[2]),
            ard_lengthscales=tuple(v[3:3 + d]),
            quad_coeff_vars=tuple(v[3 + d:6 + d]),
            nugget=nugget)


# scalar kernel evaluations, mostly useful for testing and reference

def _matern52(u):
    return (1.0 + u + u * u / 3.0) * np.exp(-u)


def k_matern52_iso(theta, theta2, magnitude_sq: float, lengthscale: float) -> float:
    r = float(np.linalg.norm(np.asarray(theta, float) - np.asarray(theta2, float)))
    return magnitude_sq * float(_matern52(SQRT5 * r / lengthscale))


def k_matern52_ard(theta, theta2, magnitude_sq: float, lengthscales) -> float:
    d = (np.asarray(theta, float) - np.asarray(theta2, float)) / np.asarray(lengthscales, float)
    return magnitude_sq * float(_matern52(SQRT5 * math.sqrt(float(d @ d))))


def k_quadratic(theta, theta2, quad_coeff_vars) -> float:
    t1 = np.asarray(theta, float)
    t2 = np.asarray(theta2, float)
    v0, v1, v2 = quad_coeff_vars
    return float(v0 * t1.size + v1 * (t1 @ t2) + v2 * (t1 ** 2 @ t2 ** 2))


def _kernel_matrix(x1: np.ndarray, x2: np.ndarray, h: GPHyperparams) -> np.ndarray:
    """Summed kernel between scaled point sets (n1, d) x (n2, d)."""
    diff = x1[:, None, :] - x2[None, :, :]
    r_iso = np.sqrt(np.maximum((diff ** 2).sum(-1), 0.0))
    k = h.iso_magnitude_sq * _matern52(SQRT5 * r_iso / h.iso_lengthscale)
    ls = np.asarray(h.ard_lengthscales)
    r_ard = np.sqrt(np.maximum(((diff / ls) ** 2).sum(-1), 0.0))
    k += h.ard_magnitude_sq * _matern52(SQRT5 * r_ard)
    v0, v1, v2 = h.quad_coeff_vars
    k += v0 * x1.shape[1] + v1 * (x1 @ x2.T) + v2 * ((x1 ** 2) @ (x2 ** 2).T)
    return k


def _kernel_diag(x: np.ndarray, h: GPHyperparams) -> np.ndarray:
    v0, v1, v2 = h.quad_coeff_vars
    return (h.iso_magnitude_sq + h.ard_magnitude_sq
            + v0 * x.shape[1] + v1 * (x ** 2).sum(1) + v2 * (x ** 4).sum(1))


@dataclass(frozen=True)
class GPEmulator:
    """Fitted emulator; immutable, cheap to condition on surrogate points.

    ``inputs``/``targets`` are on the original scales; the stored Cholesky
    factor and alpha refer to the scaled spaces.
    """

    inputs: np.ndarray
    targets: np.ndarray
    hyper: GPHyperparams
    box_lower: np.ndarray
    box_upper: np.ndarray
    y_mean: float
    y_std: float
    chol: np.ndarray
    alpha: np.ndarray

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def scale_inputs(self, x: np.ndarray) -> np.ndarray:
        center = 0.5 * (self.box_lower + self.box_upper)
        half = 0.5 * (self.box_upper - self.box_lower)
        return (np.asarray(x, float) - center) / half

    def _input_jacobian(self) -> np.ndarray:
        return 1.0 / (0.5 * (self.box_upper - self.box_lower))

    def predict(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance at one point or a batch of points."""
        x = np.atleast_2d(np.asarray(x, float))
        z = self.scale_inputs(x)
        xs = self.scale_inputs(self.inputs)
        kvec = _kernel_matrix(xs, z, self.hyper)           # (m, b)
        mu = kvec.T @ self.alpha
        v = linalg.solve_triangular(self.chol, kvec, lower=True)
        var = np.maximum(_kernel_diag(z, self.hyper) - (v ** 2).sum(0), 0.0)
        return self.y_mean + self.y_std * mu, self.y_std ** 2 * var

    def predict_scalar(self, x) -> tuple[float, float]:
        mu, var = self.predict(x)
        return float(mu[0]), float(var[0])

    def _kvec_and_grads(self, z: np.ndarray, xs: np.ndarray):
        """Kernel vectors k(z_b, xs) and their gradients wrt z, batched.

        Returns (k: (b, m), dk: (b, m, d), kss: (b,), dkss: (b, d)).
        """
        h = self.hyper
        diff = z[:, None, :] - xs[None, :, :]               # (b, m, d)
        r_iso = np.sqrt(np.maximum((diff ** 2).sum(-1), 0.0))
        u = SQRT5 * r_iso / h.iso_lengthscale
        e = np.exp(-u)
        k = h.iso_magnitude_sq * (1.0 + u + u * u / 3.0) * e
        # d k / d z = -sigma^2 e^{-u} (1+u)/3 * 5 diff / l^2
        coef = -h.iso_magnitude_sq * e * (1.0 + u) * (5.0 / (3.0 * h.iso_lengthscale ** 2))
        dk = coef[..., None] * diff

        ls = np.asarray(h.ard_lengthscales)
        sdiff = diff / ls
        r_ard = np.sqrt(np.maximum((sdiff ** 2).sum(-1), 0.0))
        ua = SQRT5 * r_ard
        ea = np.exp(-ua)
        k = k + h.ard_magnitude_sq * (1.0 + ua + ua * ua / 3.0) * ea
        coefa = -h.ard_magnitude_sq * ea * (1.0 + ua) * (5.0 / 3.0)
        dk = dk + coefa[..., None] * diff / (ls ** 2)

        v0, v1, v2 = h.quad_coeff_vars
        k = k + v0 * z.shape[1] + v1 * (z @ xs.T) + v2 * ((z ** 2) @ (xs ** 2).T)
        dk = dk + v1 * xs[None, :, :] + 2.0 * v2 * z[:, None, :] * (xs ** 2)[None, :, :]

        kss = _kernel_diag(z, h)
        dkss = 2.0 * v1 * z + 4.0 * v2 * z ** 3
        return k, dk, kss, dkss

    def predict_with_gradients(self, x):
        """Mean, variance and their gradients wrt the (natural) inputs."""
        x = np.atleast_2d(np.asarray(x, float))
        z = self.scale_inputs(x)
        xs = self.scale_inputs(self.inputs)
        k, dk, kss, dkss = self._kvec_and_grads(z, xs)
        mu = k @ self.alpha
        dmu = dk.transpose(0, 2, 1) @ self.alpha            # (b, d)
        v = linalg.solve_triangular(self.chol, k.T, lower=True)         # (m, b)
        kinv_k = linalg.solve_triangular(self.chol.T, v, lower=False)   # (m, b)
        var = np.maximum(kss - (v ** 2).sum(0), 0.0)
        dvar = dkss - 2.0 * np.einsum("bmd,mb->bd", dk, kinv_k)
        jac = self._input_jacobian()
        ys2 = self.y_std ** 2
        return (self.y_mean + self.y_std * mu, ys2 * var,
                self.y_std * dmu * jac, ys2 * dvar * jac)

    def predict_mean_gradient(self, x) -> np.ndarray:
        _, _, dmu, _ = self.predict_with_gradients(x)
        return dmu[0] if np.asarray(x).ndim == 1 else dmu

    def condition(self, x_new, target_new: float) -> "GPEmulator":
        """Emulator conditioned on one extra (point, value) pair.

        Hyperparameters and transforms are frozen; the Cholesky factor is
        extended in place of a refit. Raises :class:`SingularUpdateError` if
        the extended covariance is numerically singular.
        """
        x_new = np.asarray(x_new, float).reshape(1, -1)
        z = self.scale_inputs(x_new)
        xs = self.scale_inputs(self.inputs)
        kvec = _kernel_matrix(xs, z, self.hyper)[:, 0]
        kss = float(_kernel_diag(z, self.hyper)[0]) + self.hyper.nugget
        lrow = linalg.solve_triangular(self.chol, kvec, lower=True)
        s2 = kss - float(lrow @ lrow)
        # the nugget keeps duplicate inputs factorizable, so this only fires
        # when the pivot is lost to rounding (nugget ~ machine epsilon * kss)
        if s2 <= 1e-12 * kss:
            raise SingularUpdateError(
                f"pivot {s2:.3e} below tolerance for new training point")
        m = self.inputs.shape[0]
        chol = np.zeros((m + 1, m + 1))
        chol[:m, :m] = self.chol
        chol[m, :m] = lrow
        chol[m, m] = math.sqrt(s2)
        inputs = np.vstack([self.inputs, x_new])
        targets = np.append(self.targets, target_new)
        ys = (targets - self.y_mean) / self.y_std
        alpha = linalg.cho_solve((chol, True), ys)
        return replace(self, inputs=inputs, targets=targets, chol=chol, alpha=alpha)

    def to_json(self) -> str:
        return json.dumps({
            "inputs": self.inputs.tolist(),
            "targets": self.targets.tolist(),
            "hyper": {
                "iso_magnitude_sq": self.hyper.iso_magnitude_sq,
                "iso_lengthscale": self.hyper.iso_lengthscale,
                "ard_magnitude_sq": self.hyper.ard_magnitude_sq,
                "ard_lengthscales": list(self.hyper.ard_lengthscales),
                "quad_coeff_vars": list(self.hyper.quad_coeff_vars),
                "nugget": self.hyper.nugget,
            },
            "box_lower": self.box_lower.tolist(),
            "box_upper": self.box_upper.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        })

    @staticmethod
    def from_json(text: str) -> "GPEmulator":
        obj = json.loads(text)
        hyper = GPHyperparams(
            iso_magnitude_sq=obj["hyper"]["iso_magnitude_sq"],
            iso_lengthscale=obj["hyper"]["iso_lengthscale"],
            ard_magnitude_sq=obj["hyper"]["ard_magnitude_sq"],
            ard_lengthscales=tuple(obj["hyper"]["ard_lengthscales"]),
            quad_coeff_vars=tuple(obj["hyper"]["quad_coeff_vars"]),
            nugget=obj["hyper"]["nugget"],
        )
        return _assemble(np.asarray(obj["inputs"]), np.asarray(obj["targets"]),
                         hyper, np.asarray(obj["box_lower"]), np.asarray(obj["box_upper"]),
                         obj["y_mean"], obj["y_std"])


def _assemble(inputs, targets, hyper, box_lower, box_upper, y_mean, y_std) -> GPEmulator:
    center = 0.5 * (box_lower + box_upper)
    half = 0.5 * (box_upper - box_lower)
    xs = (inputs - center) / half
    kmat = _kernel_matrix(xs, xs, hyper) + hyper.nugget * np.eye(len(xs))
    nugget = hyper.nugget
    while True:
        try:
            chol = linalg.cholesky(kmat + (nugget - hyper.nugget) * np.eye(len(xs)),
                                   lower=True)
            break
        except linalg.LinAlgError:
            nugget *= 10.0
            if nugget > 1e-4:
                raise FitError("covariance not positive definite after jitter escalation")
    if nugget != hyper.nugget:
        hyper = replace(hyper, nugget=nugget)
    ys = (targets - y_mean) / y_std
    alpha = linalg.cho_solve((chol, True), ys)
    return GPEmulator(inputs=np.asarray(inputs, float), targets=np.asarray(targets, float),
                      hyper=hyper, box_lower=np.asarray(box_lower, float),
                      box_upper=np.asarray(box_upper, float),
                      y_mean=float(y_mean), y_std=float(y_std), chol=chol, alpha=alpha)


def _log_hyperprior_and_grad(p: np.ndarray, d: int):
    """MAP regularizer on the natural hyperparameters, as function of log-params.

    Half-N(0,1) on the isotropic magnitude (variance); half Student-t (4 dof)
    on the other magnitudes and the isotropic length scale; Student-t (4 dof)
    restricted positive on the ARD inverse length scales.
    """
    v = np.exp(p)
    lp = 0.0
    g = np.zeros_like(p)
    # iso magnitude^2 ~ N_+(0,1)
    lp += -0.5 * v[0] ** 2
    g[0] = -v[0] ** 2
    # half-t4 on iso lengthscale, ard magnitude^2, quad coefficient variances
    for i in [1, 2, *range(3 + d, 6 + d)]:
        lp += -2.5 * math.log1p(v[i] ** 2 / 4.0)
        g[i] = -2.5 * (v[i] ** 2 / 2.0) / (1.0 + v[i] ** 2 / 4.0)
    # ARD: 1/l ~ t4 restricted positive
    for i in range(3, 3 + d):
        inv2 = v[i] ** -2
        lp += -2.5 * math.log1p(inv2 / 4.0)
        g[i] = 2.5 * (inv2 / 2.0) / (1.0 + inv2 / 4.0)
    return lp, g


def _kernel_grads(xs: np.ndarray, h: GPHyperparams):
    """K and dK/d(log hyperparameter), in pack_log order."""
    d = xs.shape[1]
    diff = xs[:, None, :] - xs[None, :, :]
    grads = []

    r = np.sqrt(np.maximum((diff ** 2).sum(-1), 0.0))
    u = SQRT5 * r / h.iso_lengthscale
    e = np.exp(-u)
    k_iso = h.iso_magnitude_sq * (1.0 + u + u * u / 3.0) * e
    grads.append(k_iso)                                           # d/dlog iso_mag2
    grads.append(h.iso_magnitude_sq * e * u * u * (1.0 + u) / 3.0)  # d/dlog iso_ls

    ls = np.asarray(h.ard_lengthscales)
    sq = (diff / ls) ** 2                                          # (m, m, d)
    ua = SQRT5 * np.sqrt(np.maximum(sq.sum(-1), 0.0))
    ea = np.exp(-ua)
    k_ard = h.ard_magnitude_sq * (1.0 + ua + ua * ua / 3.0) * ea
    grads.append(k_ard)                                            # d/dlog ard_mag2
    coef = h.ard_magnitude_sq * ea * (1.0 + ua) * (5.0 / 3.0)
    for m_i in range(d):
        grads.append(coef * sq[..., m_i])                          # d/dlog ard_ls[m]

    v0, v1, v2 = h.quad_coeff_vars
    lin = xs @ xs.T
    sqr = (xs ** 2) @ (xs ** 2).T
    k_quad = v0 * d + v1 * lin + v2 * sqr
    grads.append(np.full_like(lin, v0 * d))
    grads.append(v1 * lin)
    grads.append(v2 * sqr)

    return k_iso + k_ard + k_quad, grads


def _neg_map_objective(p: np.ndarray, xs: np.ndarray, ys: np.ndarray, nugget: float):
    m, d = xs.shape
    h = GPHyperparams.unpack_log(p, nugget)
    kmat, grads = _kernel_grads(xs, h)
    kmat[np.diag_indices(m)] += nugget
    try:
        chol = linalg.cholesky(kmat, lower=True)
    except linalg.LinAlgError:
        return 1e10, np.zeros_like(p)
    alpha = linalg.cho_solve((chol, True), ys)
    nll = 0.5 * float(ys @ alpha) + float(np.log(np.diag(chol)).sum()) \
        + 0.5 * m * math.log(2 * math.pi)
    kinv = linalg.cho_solve((chol, True), np.eye(m))
    outer = np.outer(alpha, alpha)
    grad = np.array([-0.5 * float(((outer - kinv) * dk).sum()) for dk in grads])
    lp, lp_grad = _log_hyperprior_and_grad(p, d)
    return nll - lp, grad - lp_grad


_BOUND_LO = np.log(1e-6)
_BOUND_HI = np.log(1e4)


def _start_points(d: int) -> list[np.ndarray]:
    """Eight deterministic multi-start hyperparameter vectors (log space)."""
    starts = []
    for mags, ls in [((0.5, 0.5, 0.2), 1.0), ((1.0, 0.1, 0.05), 0.5),
                     ((0.1, 1.0, 0.05), 2.0), ((0.2, 0.2, 1.0), 1.0),
                     ((1.0, 1.0, 1.0), 0.25), ((0.05, 0.05, 0.5), 4.0),
                     ((0.5, 0.1, 0.02), 1.0), ((0.1, 0.1, 0.1), 0.7)]:
        p = np.concatenate(([mags[0], ls, mags[1]], np.full(d, ls),
                            [mags[2], mags[2], mags[2]]))
        starts.append(np.log(p))
    return starts


def fit(inputs, targets, box_lower=None, box_upper=None, n_starts: int = 8,
        warm: GPHyperparams | None = None, nugget_rel: float = 1e-8) -> GPEmulator:
    """MAP-fit the emulator hyperparameters and assemble the factorization.

    ``warm`` adds a start at a previously fitted hyperparameter vector, which
    keeps refits cheap inside the BO loop (``n_starts`` may then be lowered).
    """
    inputs = np.asarray(inputs, float)
    targets = np.asarray(targets, float)
    m, d = inputs.shape
    if m < 2:
        raise ValueError("need at least two training points")
    if box_lower is None:
        box_lower = inputs.min(0)
        box_upper = inputs.max(0)
    box_lower = np.asarray(box_lower, float)
    box_upper = np.asarray(box_upper, float)
    width = box_upper - box_lower
    if np.any(width <= 0):
        raise ValueError("degenerate search box")

    center = 0.5 * (box_lower + box_upper)
    xs = (inputs - center) / (0.5 * width)
    y_mean = float(targets.mean())
    y_std = float(targets.std())
    if y_std <= 0:
        y_std = 1.0
    ys = (targets - y_mean) / y_std
    nugget = nugget_rel  # targets are unit variance after scaling

    starts = _start_points(d)[:n_starts]
    if warm is not None:
        starts.insert(0, warm.pack_log())
    bounds = [(_BOUND_LO, _BOUND_HI)] * (6 + d)
    best = None
    for p0 in starts:
        res = optimize.minimize(
            _neg_map_objective, np.clip(p0, _BOUND_LO, _BOUND_HI),
            args=(xs, ys, nugget), jac=True, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": 200})
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.all(np.isfinite(best.x)):
        raise FitError("hyperparameter optimization failed from all starts")
    hyper = GPHyperparams.unpack_log(best.x, nugget)
    return _assemble(inputs, targets, hyper, box_lower, box_upper, y_mean, y_std)
