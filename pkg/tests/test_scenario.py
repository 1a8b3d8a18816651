import json
import math

import numpy as np
import pytest

from simcal.data_model import (
    CalibrationDataset,
    LAYER_SURFACE,
    Observation,
    SimulatorOutput,
    VARIABLES,
)
from simcal.sampling import PosteriorSamples
from simcal.scenario import (
    PredictiveEnsemble,
    ScenarioError,
    ScenarioSpec,
    ges_probability,
    interval_pair,
    predictive_intervals,
    r_squared,
    run_scenario,
    weighted_quantile,
    window_mean_chla,
    write_scenario_outputs,
)

CHLA = VARIABLES.index("chla")
DIN = VARIABLES.index("DIN")


def _output(chla=1.0, days=400, boxes=2, fill=1.0):
    tensor = np.full((2, len(VARIABLES), days, boxes), fill)
    tensor[LAYER_SURFACE, CHLA] = chla
    return SimulatorOutput(tensor)


def _samples(n, names=("a",), seed=0):
    rng = np.random.default_rng(seed)
    return PosteriorSamples(
        names=names, thetas=rng.standard_normal((n, len(names))),
        sigma2={}, weights=np.ones(n), ess=float(n), stride=1, n_raw=n)


def _ensemble(chla_values, weights=None, spec=None):
    spec = spec or ScenarioSpec("test")
    outputs = [_output(c) for c in chla_values]
    n = len(outputs)
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    return PredictiveEnsemble(spec, outputs, w / w.mean(), np.arange(n))


class TestScenarioSpec:
    def test_negative_multiplier_rejected(self):
        with pytest.raises(ValueError):
            ScenarioSpec("x", load_multiplier=-0.1)

    def test_bad_window_rejected(self):
        with pytest.raises(ValueError):
            ScenarioSpec("x", ges_window=(250, 182))

    def test_default_window_is_july_to_early_september(self):
        assert ScenarioSpec("x").ges_window == (182, 250)


class TestWindowMean:
    def test_days_then_boxes_averaging(self):
        out = _output(days=400, boxes=2)
        t = out.tensor[LAYER_SURFACE, CHLA]
        t[:, 0] = 2.0
        t[:, 1] = 4.0
        t[200, 0] = 100.0   # day inside the window shifts box 0's day-mean
        spec = ScenarioSpec("x", ges_window=(182, 250))
        days_in = np.where((np.arange(400) % 365 + 1 >= 182)
                           & (np.arange(400) % 365 + 1 <= 250))[0]
        box0 = (2.0 * (len(days_in) - 1) + 100.0) / len(days_in)
        assert window_mean_chla(out, spec) == pytest.approx((box0 + 4.0) / 2)

    def test_region_subset(self):
        out = _output(days=400, boxes=3)
        out.tensor[LAYER_SURFACE, CHLA, :, :] = [[1.0, 5.0, 9.0]]
        spec = ScenarioSpec("x", region=(0, 2))
        assert window_mean_chla(out, spec) == pytest.approx(5.0)

    def test_window_outside_simulation_errors(self):
        out = _output(days=100)
        with pytest.raises(ScenarioError):
            window_mean_chla(out, ScenarioSpec("x", ges_window=(182, 250)))


class TestGesProbability:
    def test_all_below_is_one(self):
        ens = _ensemble([1.0, 2.0, 2.9])
        assert ges_probability(ens) == 1.0

    def test_fraction_with_equal_weights(self):
        chla = [2.0] * 3 + [5.0] * 197
        ens = _ensemble(chla)
        assert ges_probability(ens) == pytest.approx(3 / 200)

    def test_weighted_fraction(self):
        # only the double-weighted first sample is below the threshold
        n = 10
        ens = _ensemble([1.0] + [5.0] * (n - 1), weights=[2.0] + [1.0] * (n - 1))
        assert ges_probability(ens) == pytest.approx(2.0 / (n + 1))

    def test_threshold_is_strict(self):
        ens = _ensemble([3.0, 5.0])
        assert ges_probability(ens) == 0.0   # equality does not count

    def test_monotone_in_threshold(self):
        ens = _ensemble(np.linspace(0.5, 6.0, 40))
        probs = [ges_probability(ens, ScenarioSpec("x", ges_threshold=t))
                 for t in (1.0, 2.0, 3.0, 4.0)]
        assert probs == sorted(probs)


class TestWeightedQuantile:
    def test_matches_numpy_for_equal_weights(self):
        rng = np.random.default_rng(1)
        v = rng.standard_normal(2001)
        w = np.ones_like(v)
        for q in (0.025, 0.5, 0.975):
            ours = weighted_quantile(v, w, q)
            ref = np.quantile(v, q)
            # conventions differ slightly in the tails (midpoint cumulative
            # weights vs linear order-statistic interpolation)
            assert ours == pytest.approx(ref, abs=0.05)

    def test_point_mass(self):
        v = np.array([1.0, 2.0, 3.0])
        w = np.array([0.0, 1.0, 0.0])
        assert weighted_quantile(v, w + 1e-12, 0.5) == pytest.approx(2.0, abs=1e-6)

    def test_median_of_two_points(self):
        assert weighted_quantile(np.array([0.0, 1.0]), np.ones(2), 0.5) == \
            pytest.approx(0.5)


class TestIntervals:
    def test_zero_noise_intervals_coincide(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal(200)
        par, obs = interval_pair(f, np.zeros(200), np.ones(200), 0.9, 0.9, rng)
        assert np.allclose(par, obs)

    def test_observation_contains_parameter_at_equal_levels(self):
        rng = np.random.default_rng(1)
        f = rng.standard_normal(200)
        sigma = np.full(200, 0.5)
        par, obs = interval_pair(f, sigma, np.ones(200), 0.9, 0.9, rng)
        assert obs[0] <= par[0] and obs[1] >= par[1]

    def test_noise_widens_interval(self):
        rng = np.random.default_rng(2)
        f = rng.standard_normal(500)
        par, obs = interval_pair(f, np.full(500, 2.0), np.ones(500), 0.9, 0.9, rng)
        assert obs[1] - obs[0] > par[1] - par[0]

    def test_predictive_intervals_rows(self):
        n = 50
        rng = np.random.default_rng(3)
        chla = np.exp(rng.normal(0.5, 0.2, n))
        ens = _ensemble(chla)
        obs = [Observation(0, "chla", 200, LAYER_SURFACE, 1.6)]
        ds = CalibrationDataset(obs, {(LAYER_SURFACE, "chla"): (0.5, 0.2)}, {})
        samples = PosteriorSamples(
            names=("a",), thetas=np.zeros((n, 1)),
            sigma2={(LAYER_SURFACE, "chla"): np.full(n, 1.0)},
            weights=np.ones(n), ess=float(n), stride=1, n_raw=n)
        rows = predictive_intervals(ens, samples, ds, level_param=0.9,
                                    level_obs=0.9)
        assert len(rows) == 1
        r = rows[0]
        assert r["obs_lo"] <= r["param_lo"] <= r["param_hi"] <= r["obs_hi"]
        assert r["param_lo"] > 0   # natural units


def _r2_setup(yhat_log):
    """One-output ensemble predicting exp(yhat_log) on days 0,1,2."""
    out = _output(days=400, boxes=1)
    for day, v in enumerate(yhat_log):
        out.tensor[LAYER_SURFACE, CHLA, day, 0] = math.exp(v)
    ens = PredictiveEnsemble(ScenarioSpec("x"), [out], np.ones(1), np.zeros(1, int))
    obs = [Observation(0, "chla", day, LAYER_SURFACE, math.exp(v))
           for day, v in enumerate([0.0, 1.0, 2.0])]
    ds = CalibrationDataset(obs, {(LAYER_SURFACE, "chla"): (1.0, 1.0)}, {})
    return ens, ds


class TestRSquared:
    def test_hand_case_half(self):
        ens, ds = _r2_setup([0.0, 1.0, 1.0])
        r2 = r_squared(ens, ds)
        assert r2[(0, "chla")] == pytest.approx(1.0 - 1.0 / 2.0)

    def test_perfect_prediction(self):
        ens, ds = _r2_setup([0.0, 1.0, 2.0])
        assert r_squared(ens, ds)[(0, "chla")] == pytest.approx(1.0)

    def test_mean_prediction_is_zero(self):
        ens, ds = _r2_setup([1.0, 1.0, 1.0])
        assert r_squared(ens, ds)[(0, "chla")] == pytest.approx(0.0)

    def test_zero_spread_errors(self):
        out = _output(days=400, boxes=1)
        ens = PredictiveEnsemble(ScenarioSpec("x"), [out], np.ones(1),
                                 np.zeros(1, int))
        obs = [Observation(0, "chla", d, LAYER_SURFACE, 2.0) for d in (0, 1)]
        ds = CalibrationDataset(obs, {(LAYER_SURFACE, "chla"): (1.0, 1.0)}, {})
        with pytest.raises(ScenarioError):
            r_squared(ens, ds)

    def test_censored_observations_excluded(self):
        ens, ds = _r2_setup([0.0, 1.0, 1.0])
        obs = list(ds.observations)
        obs.append(Observation(0, "chla", 3, LAYER_SURFACE, 0.1,
                               censored=True, censor_bound=0.1))
        ds2 = CalibrationDataset(obs, ds.standardizers, ds.censor_thresholds)
        assert r_squared(ens, ds2) == r_squared(ens, ds)


class _FlakySimulator:
    """Fails on a fixed set of call indices."""

    def __init__(self, fail_at):
        self.fail_at = set(fail_at)
        self.calls = 0

    def evaluate(self, params, mult):
        i = self.calls
        self.calls += 1
        if i in self.fail_at:
            raise RuntimeError("boom")
        return _output(chla=float(2.0 + i))


class TestRunScenario:
    def test_bau_cache_reused_verbatim(self):
        samples = _samples(4)
        cached = [_output(c) for c in (1.0, 2.0, 3.0, 4.0)]
        ens = run_scenario(None, ScenarioSpec("bau"), samples, bau_outputs=cached)
        assert all(a is b for a, b in zip(ens.outputs, cached))
        assert np.array_equal(ens.sample_indices, np.arange(4))

    def test_failures_dropped_and_weights_renormalized(self):
        samples = _samples(20)
        sim = _FlakySimulator(fail_at={3})
        ens = run_scenario(sim, ScenarioSpec("s", load_multiplier=0.5), samples)
        assert len(ens) == 19
        assert 3 not in ens.sample_indices
        assert ens.weights.mean() == pytest.approx(1.0)
        assert len(ens.failures) == 1

    def test_too_many_failures_abort(self):
        samples = _samples(10)
        sim = _FlakySimulator(fail_at={0, 1})
        with pytest.raises(ScenarioError):
            run_scenario(sim, ScenarioSpec("s", load_multiplier=0.5), samples)

    def test_load_reduction_lowers_din_per_sample(self):
        import sys
        sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
        import synthetic as syn

        sim = syn.simulator()
        rng = np.random.default_rng(5)
        n = 4
        thetas = syn.THETA_STAR + 0.05 * rng.standard_normal((n, 5))
        samples = PosteriorSamples(
            names=syn.PARAM_NAMES, thetas=thetas, sigma2={},
            weights=np.ones(n), ess=float(n), stride=1, n_raw=n)
        full = run_scenario(sim, ScenarioSpec("full", load_multiplier=1.0), samples)
        low = run_scenario(sim, ScenarioSpec("low", load_multiplier=0.2), samples)
        for a, b in zip(full.outputs, low.outputs):
            din_full = a.tensor[LAYER_SURFACE, DIN].mean()
            din_low = b.tensor[LAYER_SURFACE, DIN].mean()
            assert din_low < din_full


class TestOutputs:
    def test_written_files_and_summary(self, tmp_path):
        n = 30
        rng = np.random.default_rng(4)
        ens = _ensemble(np.exp(rng.normal(0.8, 0.3, n)))
        obs = [Observation(0, "chla", d, LAYER_SURFACE, float(np.exp(0.8 + 0.1 * d)))
               for d in range(3)]
        ds = CalibrationDataset(obs, {(LAYER_SURFACE, "chla"): (0.8, 0.3)}, {})
        samples = PosteriorSamples(
            names=("a",), thetas=np.zeros((n, 1)),
            sigma2={(LAYER_SURFACE, "chla"): np.full(n, 0.5)},
            weights=np.ones(n), ess=float(n), stride=1, n_raw=n)
        write_scenario_outputs(tmp_path, ens, samples, ds, month_filter=None)
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["scenario"] == "test"
        assert 0.0 <= summary["ges_probability"] <= 1.0
        assert (tmp_path / "chla_density.csv").exists()
        assert (tmp_path / "intervals.csv").exists()
        assert (tmp_path / "r2.csv").exists()
