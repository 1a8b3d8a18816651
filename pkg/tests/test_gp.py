import math

import numpy as np
import pytest

from simcal.gp import (
    GPEmulator,
    GPHyperparams,
    SingularUpdateError,
    _kernel_matrix,
    _neg_map_objective,
    fit,
    k_matern52_ard,
    k_matern52_iso,
    k_quadratic,
)

HYPER = GPHyperparams(iso_magnitude_sq=1.0, iso_lengthscale=0.5,
                      ard_magnitude_sq=0.5, ard_lengthscales=(0.4, 0.9),
                      quad_coeff_vars=(0.2, 0.1, 0.05), nugget=1e-8)


class TestKernels:
    def test_iso_at_zero_distance(self):
        x = np.array([0.3, -0.2])
        assert k_matern52_iso(x, x, 2.5, 1.0) == pytest.approx(2.5, rel=1e-14)

    def test_iso_at_unit_scaled_distance(self):
        # closed form at r = l: (1 + sqrt5 + 5/3) exp(-sqrt5)
        x = np.array([0.0])
        y = np.array([0.7])
        expected = (1 + math.sqrt(5) + 5 / 3) * math.exp(-math.sqrt(5))
        assert expected == pytest.approx(0.524, abs=1e-3)
        assert k_matern52_iso(x, y, 1.0, 0.7) == pytest.approx(expected, rel=1e-12)

    def test_iso_symmetric(self):
        a = np.array([0.1, 0.2])
        b = np.array([-0.4, 0.9])
        assert k_matern52_iso(a, b, 1.3, 0.6) == k_matern52_iso(b, a, 1.3, 0.6)

    def test_ard_reduces_to_iso_with_equal_lengthscales(self):
        a = np.array([0.1, 0.2, -0.3])
        b = np.array([-0.4, 0.9, 0.5])
        assert k_matern52_ard(a, b, 1.2, (0.7, 0.7, 0.7)) == pytest.approx(
            k_matern52_iso(a, b, 1.2, 0.7), rel=1e-12)

    def test_ard_huge_lengthscale_ignores_coordinate(self):
        a = np.array([0.0, 0.0])
        b = np.array([0.5, 0.0])
        ls = (0.5, 1e6)
        k0 = k_matern52_ard(a, b, 1.0, ls)
        b2 = b.copy()
        b2[1] = 1.0
        assert abs(k_matern52_ard(a, b2, 1.0, ls) - k0) < 1e-6

    def test_quadratic_known_values(self):
        z = np.zeros(5)
        assert k_quadratic(z, z, (1.0, 1.0, 1.0)) == pytest.approx(5.0)
        o = np.ones(1)
        assert k_quadratic(o, o, (1.0, 1.0, 1.0)) == pytest.approx(3.0)

    def test_quadratic_positive_semidefinite(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            pts = rng.uniform(-1, 1, size=(10, 3))
            h = GPHyperparams(1e-12, 1.0, 1e-12, (1.0, 1.0, 1.0),
                              tuple(rng.uniform(0.1, 2.0, 3)), 1e-12)
            gram = _kernel_matrix(pts, pts, h)
            assert np.linalg.eigvalsh(gram).min() >= -1e-10

    def test_summed_gram_positive_definite(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(-1, 1, size=(20, 2))
        gram = _kernel_matrix(pts, pts, HYPER) + HYPER.nugget * np.eye(20)
        np.linalg.cholesky(gram)  # must not raise


def _fit_1d(func, n=12, **kwargs):
    x = np.linspace(-1, 1, n).reshape(-1, 1)
    y = func(x[:, 0])
    return fit(x, y, np.array([-1.0]), np.array([1.0]), **kwargs), x, y


class TestFitPredict:
    def test_constant_targets_predict_constant(self):
        gp, x, y = _fit_1d(lambda t: np.full_like(t, 3.7))
        mu, _ = gp.predict(np.linspace(-0.9, 0.9, 17).reshape(-1, 1))
        assert np.allclose(mu, 3.7, atol=1e-3 * 3.7 + 1e-6)

    def test_interpolates_training_points(self):
        gp, x, y = _fit_1d(np.sin)
        mu, _ = gp.predict(x)
        assert np.max(np.abs(mu - y)) <= 1e-4 * (y.max() - y.min())

    def test_refit_deterministic(self):
        gp1, x, y = _fit_1d(np.sin)
        gp2, _, _ = _fit_1d(np.sin)
        assert gp1.hyper == gp2.hyper

    def test_variance_reverts_to_prior_far_away(self):
        # with negligible quadratic weights only the stationary components
        # matter, and those decay: variance far from data is the prior k(z, z)
        from simcal.gp import _assemble

        x = np.linspace(-1, 1, 12).reshape(-1, 1)
        y = np.sin(x[:, 0])
        h = GPHyperparams(1.0, 0.3, 0.5, (0.4,), (1e-12, 1e-12, 1e-12), 1e-8)
        gp = _assemble(x, y, h, np.array([-1.0]), np.array([1.0]), 0.0, 1.0)
        far = np.array([[40.0]])
        _, var = gp.predict(far)
        zf = gp.scale_inputs(far)
        prior_var = _kernel_matrix(zf, zf, h)[0, 0]
        assert var[0] == pytest.approx(prior_var, rel=1e-6)

    def test_matches_textbook_conditional(self):
        # 3-point closed-form GP conditional computed by hand linear algebra
        x = np.array([[-0.5], [0.0], [0.6]])
        y = np.array([1.0, -0.3, 0.4])
        h = HYPER
        h = GPHyperparams(1.0, 0.5, 0.5, (0.4,), (0.2, 0.1, 0.05), 1e-8)
        from simcal.gp import _assemble
        gp = _assemble(x, y, h, np.array([-1.0]), np.array([1.0]), 0.0, 1.0)
        z = np.array([[0.3]])
        k_star = _kernel_matrix(gp.scale_inputs(z), gp.scale_inputs(x), h)[0]
        gram = _kernel_matrix(gp.scale_inputs(x), gp.scale_inputs(x), h) + 1e-8 * np.eye(3)
        mu_hand = k_star @ np.linalg.solve(gram, y)
        var_hand = (_kernel_matrix(gp.scale_inputs(z), gp.scale_inputs(z), h)[0, 0]
                    - k_star @ np.linalg.solve(gram, k_star))
        mu, var = gp.predict(z)
        assert mu[0] == pytest.approx(mu_hand, rel=1e-10)
        assert var[0] == pytest.approx(var_hand, rel=1e-8, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-1, 1, size=(15, 2))
        y = np.sin(x[:, 0]) + x[:, 1] ** 2
        gp1 = fit(x, y, n_starts=2)
        perm = rng.permutation(15)
        gp2 = fit(x[perm], y[perm], n_starts=2)
        z = rng.uniform(-1, 1, size=(6, 2))
        assert np.allclose(gp1.predict(z)[0], gp2.predict(z)[0], atol=1e-6)

    def test_lengthscale_recovery_from_known_gp(self):
        rng = np.random.default_rng(11)
        true_ls = np.array([0.3, 0.8])
        x = rng.uniform(-1, 1, size=(60, 2))
        gram = _kernel_matrix(x, x, GPHyperparams(1e-12, 1.0, 1.0, tuple(true_ls),
                                                  (1e-12, 1e-12, 1e-12), 1e-12))
        y = np.linalg.cholesky(gram + 1e-10 * np.eye(60)) @ rng.standard_normal(60)
        gp = fit(x, y, np.array([-1, -1.0]), np.array([1, 1.0]))
        rec = np.asarray(gp.hyper.ard_lengthscales)
        assert np.all(np.abs(np.log(rec) - np.log(true_ls)) < math.log(1.5))

    def test_added_point_never_increases_variance(self):
        gp, x, y = _fit_1d(np.sin)
        z = np.linspace(-1, 1, 31).reshape(-1, 1)
        _, var_before = gp.predict(z)
        gp2 = gp.condition(np.array([0.37]), 0.1)
        _, var_after = gp2.predict(z)
        assert np.all(var_after <= var_before + 1e-10)

    def test_condition_on_training_point_is_singular(self):
        # with a nugget at rounding level a duplicate input has no pivot left
        from simcal.gp import _assemble

        x = np.linspace(-1, 1, 8).reshape(-1, 1)
        y = np.sin(x[:, 0])
        h = GPHyperparams(1.0, 0.5, 0.5, (0.4,), (0.1, 0.1, 0.1), 1e-16)
        gp = _assemble(x, y, h, np.array([-1.0]), np.array([1.0]), 0.0, 1.0)
        with pytest.raises(SingularUpdateError):
            gp.condition(x[3], y[3])

    def test_condition_with_healthy_nugget_tolerates_duplicates(self):
        gp, x, y = _fit_1d(np.sin)
        gp2 = gp.condition(x[3], y[3])   # regularized: must not raise
        assert gp2.inputs.shape[0] == gp.inputs.shape[0] + 1


class TestGradients:
    def _gp(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=(20, 2))
        y = np.sin(2 * x[:, 0]) + 0.5 * x[:, 1] ** 2
        return fit(x, y, n_starts=2)

    def test_mean_gradient_matches_fd(self):
        gp = self._gp()
        rng = np.random.default_rng(8)
        h = 1e-5
        for _ in range(10):
            z = rng.uniform(-0.9, 0.9, size=2)
            grad = gp.predict_mean_gradient(z)
            for i in range(2):
                zp, zm = z.copy(), z.copy()
                zp[i] += h
                zm[i] -= h
                fd = (gp.predict(zp[None])[0][0] - gp.predict(zm[None])[0][0]) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_variance_gradient_matches_fd(self):
        gp = self._gp()
        rng = np.random.default_rng(12)
        h = 1e-5
        z = rng.uniform(-0.9, 0.9, size=(5, 2))
        _, _, _, dvar = gp.predict_with_gradients(z)
        for j in range(5):
            for i in range(2):
                zp, zm = z[j].copy(), z[j].copy()
                zp[i] += h
                zm[i] -= h
                fd = (gp.predict(zp[None])[1][0] - gp.predict(zm[None])[1][0]) / (2 * h)
                assert dvar[j, i] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_linear_function_slope_reproduced(self):
        x = np.linspace(-1, 1, 10).reshape(-1, 1)
        y = 2.0 * x[:, 0] + 1.0
        gp = fit(x, y, np.array([-1.0]), np.array([1.0]))
        grad = gp.predict_mean_gradient(np.array([0.2]))
        assert grad[0] == pytest.approx(2.0, abs=1e-4)

    def test_constant_targets_zero_gradient(self):
        x = np.linspace(-1, 1, 8).reshape(-1, 1)
        gp = fit(x, np.full(8, 2.0), np.array([-1.0]), np.array([1.0]))
        assert abs(gp.predict_mean_gradient(np.array([0.1]))[0]) < 1e-5

    def test_map_objective_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        xs = rng.uniform(-1, 1, size=(12, 2))
        ys = np.sin(xs[:, 0]) - xs[:, 1]
        ys = (ys - ys.mean()) / ys.std()
        p0 = GPHyperparams(0.8, 0.6, 0.4, (0.5, 1.1), (0.3, 0.2, 0.1), 1e-8).pack_log()
        f0, g0 = _neg_map_objective(p0, xs, ys, 1e-8)
        h = 1e-6
        for i in range(len(p0)):
            pp, pm = p0.copy(), p0.copy()
            pp[i] += h
            pm[i] -= h
            fd = (_neg_map_objective(pp, xs, ys, 1e-8)[0]
                  - _neg_map_objective(pm, xs, ys, 1e-8)[0]) / (2 * h)
            assert g0[i] == pytest.approx(fd, rel=2e-5, abs=1e-7)


class TestSerialization:
    def test_json_roundtrip_exact(self):
        gp, x, y = _fit_1d(np.sin)
        back = GPEmulator.from_json(gp.to_json())
        z = np.linspace(-1, 1, 9).reshape(-1, 1)
        assert np.array_equal(gp.predict(z)[0], back.predict(z)[0])
        assert np.array_equal(gp.predict(z)[1], back.predict(z)[1])
        assert gp.hyper == back.hyper
