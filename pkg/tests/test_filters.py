"""Grids, resampling and the two bootstrap filters against the oracles."""

import math

import numpy as np
import pytest

from coxpf import estimator as est
from coxpf import filters, oracles, sde
from coxpf.estimator import EstimatorConfig, PESample
from coxpf.observation import GaussianMark, IntensityModel
from coxpf.rng import make_stream

BENCH = dict(
    spec=oracles.BENCHMARK_SPEC,
    intensity=oracles.BENCHMARK_INTENSITY,
    marks=GaussianMark(1.0),
    init=oracles.benchmark_init_law(),
)


def run_cont(obs, delta, n, stream, lipschitz=1.0, policy="truncate", **kw):
    cfg = EstimatorConfig(delta=delta, lipschitz=lipschitz, policy=policy)
    return filters.run_continuous_pf(
        BENCH["spec"], BENCH["intensity"], BENCH["marks"], obs, cfg, n, stream, BENCH["init"],
        lipschitz_seed=lipschitz, **kw
    )


class TestObservationSet:
    def test_validation(self):
        with pytest.raises(ValueError):
            filters.ObservationSet(np.array([0.5, 0.5]), np.zeros((2, 1)), 1.0)
        with pytest.raises(ValueError):
            filters.ObservationSet(np.array([1.0]), np.zeros((1, 1)), 1.0)  # at the horizon
        with pytest.raises(ValueError):
            filters.ObservationSet(np.array([0.5]), np.zeros((2, 1)), 1.0)
        empty = filters.ObservationSet.empty(2.0)
        assert empty.count == 0


class TestTimeGrid:
    def test_regular_grid(self):
        g = filters.build_time_grid(filters.ObservationSet.empty(1.0), 0.25)
        np.testing.assert_array_equal(g.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        assert not g.is_observation.any()

    def test_observation_refinement(self):
        obs = filters.ObservationSet(np.array([0.3]), np.zeros((1, 1)), 1.0)
        g = filters.build_time_grid(obs, 0.25)
        np.testing.assert_allclose(g.times, [0.0, 0.25, 0.3, 0.55, 0.8, 1.0])
        assert g.obs_index[2] == 0 and g.is_observation.sum() == 1

    def test_tie_emits_single_flagged_node(self):
        obs = filters.ObservationSet(np.array([0.25]), np.zeros((1, 1)), 1.0)
        g = filters.build_time_grid(obs, 0.25)
        np.testing.assert_array_equal(g.times, [0.0, 0.25, 0.5, 0.75, 1.0])
        assert g.obs_index[1] == 0

    def test_observation_times_appear_exactly(self):
        rng = np.random.default_rng(5)
        times = np.sort(rng.uniform(0.01, 1.99, 17))
        obs = filters.ObservationSet(times, np.zeros((17, 1)), 2.0)
        g = filters.build_time_grid(obs, 0.1)
        for t in times:
            assert t in g.times  # exact membership, not tolerance
        gaps = np.diff(g.times)
        assert gaps.min() > 0 and gaps.max() <= 0.1 + 1e-15
        assert g.times[-1] == 2.0

    def test_float_accumulation_near_observation(self):
        # a step multiple landing within float error of an arrival must not
        # produce an empty segment
        obs = filters.ObservationSet(np.array([0.5, 1.2]), np.zeros((2, 1)), 2.0)
        g = filters.build_time_grid(obs, 0.1)
        assert np.diff(g.times).min() > 0
        assert {0.5, 1.2} <= set(g.times.tolist())

    def test_observation_spaced_grid(self):
        obs = filters.ObservationSet(np.array([0.4, 1.1]), np.zeros((2, 1)), 2.0)
        g = filters.build_time_grid(obs, np.inf)
        np.testing.assert_array_equal(g.times, [0.0, 0.4, 1.1, 2.0])


class TestSystematicResample:
    def test_equal_weights_identity_copy_counts(self):
        idx = filters.systematic_resample(np.ones(64), make_stream(0))
        np.testing.assert_array_equal(np.sort(idx), np.arange(64))

    def test_unit_weight_takes_all(self):
        w = np.zeros(10)
        w[3] = 1.0
        idx = filters.systematic_resample(w, make_stream(1))
        assert np.all(idx == 3)

    def test_expected_copy_counts(self):
        w = np.array([0.5, 0.3, 0.2])
        n_rep = 20000
        counts = np.zeros((n_rep, 3))
        for r in range(n_rep):
            idx = filters.systematic_resample(w, make_stream(2, r))
            counts[r] = np.bincount(idx, minlength=3)
        target = 3 * w
        se = counts.std(axis=0) / math.sqrt(n_rep)
        assert np.all(np.abs(counts.mean(axis=0) - target) < 4 * se + 1e-12)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            filters.systematic_resample(np.zeros(5), make_stream(3))


class TestDiscretisedFilter:
    def test_zero_rate_unit_likelihood(self):
        out = filters.run_discretised_pf(
            BENCH["spec"], IntensityModel.constant(0.0), BENCH["marks"],
            filters.ObservationSet.empty(1.0), 0.25, 50, make_stream(4), BENCH["init"],
        )
        assert out.log_likelihood == 0.0

    def test_constant_rate_exact(self):
        out = filters.run_discretised_pf(
            BENCH["spec"], IntensityModel.constant(2.0), BENCH["marks"],
            filters.ObservationSet.empty(1.0), 0.25, 50, make_stream(5), BENCH["init"],
        )
        np.testing.assert_allclose(out.log_likelihood, -2.0, rtol=1e-12)

    def test_mean_matches_discretised_quadrature(self):
        """Unbiased for the discretised likelihood at the quadrature's grid cap."""
        obs = filters.ObservationSet.empty(0.5)
        delta = 0.125
        truth = oracles.quadrature_likelihood_delta(BENCH["intensity"], obs, delta)
        values = np.array(
            [
                filters.run_discretised_pf(
                    BENCH["spec"], BENCH["intensity"], BENCH["marks"], obs, delta, 1000,
                    make_stream(6, "disc", r), BENCH["init"],
                ).likelihood
                for r in range(200)
            ]
        )
        se = values.std() / math.sqrt(values.size)
        assert abs(values.mean() - truth) < 3 * se

    def test_two_node_toy_grid_unbiasedness(self):
        obs = filters.ObservationSet(np.array([0.6]), np.array([[0.2]]), 1.0)
        delta = 0.6  # grid {0, 0.6, 1.0}
        truth = oracles.quadrature_likelihood_delta(BENCH["intensity"], obs, delta)
        values = np.array(
            [
                filters.run_discretised_pf(
                    BENCH["spec"], BENCH["intensity"], BENCH["marks"], obs, delta, 800,
                    make_stream(7, "toy", r), BENCH["init"],
                ).likelihood
                for r in range(500)
            ]
        )
        se = values.std() / math.sqrt(values.size)
        assert abs(values.mean() - truth) < 3 * se


class TestContinuousFilter:
    def test_constant_rate_exact_with_zero_negatives(self):
        out = filters.run_continuous_pf(
            BENCH["spec"], IntensityModel.constant(2.0), BENCH["marks"],
            filters.ObservationSet.empty(1.5), EstimatorConfig(delta=0.25, lipschitz=1.0), 100,
            make_stream(8), BENCH["init"], lipschitz_seed=1.0,
        )
        np.testing.assert_allclose(out.log_likelihood, -3.0, rtol=1e-12)
        assert out.negative_count == 0

    def test_no_obs_benchmark_mean(self):
        obs = filters.ObservationSet.empty(2.0)
        values = np.array([run_cont(obs, 0.1, 2000, make_stream(9, "c", r)).likelihood for r in range(80)])
        truth = oracles.likelihood_no_obs(2.0)
        se = values.std() / math.sqrt(values.size)
        assert abs(values.mean() - truth) < 3 * se

    def test_two_obs_benchmark_mean(self):
        obs = filters.ObservationSet(np.array([0.5, 1.2]), np.array([[0.3], [-0.2]]), 2.0)
        truth = oracles.likelihood_two_obs(0.5, 1.2, 0.3, -0.2, 2.0, 1.0)
        values = np.array([run_cont(obs, 0.1, 4000, make_stream(10, "c2", r)).likelihood for r in range(80)])
        se = values.std() / math.sqrt(values.size)
        assert abs(values.mean() - truth) < 3 * se

    def test_matches_exact_weight_filter_in_mean(self):
        """Isolates estimator error from filter error (shared skeleton)."""
        obs = filters.ObservationSet.empty(2.0)
        pe = np.array([run_cont(obs, 0.1, 10**4, make_stream(11, "pe", r)).likelihood for r in range(100)])
        xw = np.array(
            [oracles.run_exact_weight_pf(obs, 0.1, 10**4, make_stream(11, "xw", r)).likelihood for r in range(100)]
        )
        se = math.sqrt(pe.var() / pe.size + xw.var() / xw.size)
        assert abs(pe.mean() - xw.mean()) < 3 * se

    def test_all_zero_weight_step_returns_zero_likelihood(self):
        def all_negative(spec, intensity, eta, t0, t1, x, rng, rates_start=None):
            n = x.shape[0]
            return PESample(
                log_abs=np.zeros(n),
                sign=-np.ones(n, dtype=np.int8),
                kappa=np.ones(n, dtype=np.int64),
                x_end=x,
            )

        out = run_cont(filters.ObservationSet.empty(1.0), 0.5, 20, make_stream(12), segment_estimator=all_negative)
        assert out.log_likelihood == -math.inf and out.likelihood == 0.0
        assert out.degenerate_step == 1
        assert out.negative_count == 20

    def test_log_space_accumulator_extreme_rates(self):
        """No overflow/underflow up to rate 1e3 over horizon 100."""
        out = filters.run_continuous_pf(
            BENCH["spec"], IntensityModel.constant(1000.0), BENCH["marks"],
            filters.ObservationSet.empty(100.0), EstimatorConfig(delta=1.0, lipschitz=1.0), 30,
            make_stream(13), BENCH["init"], lipschitz_seed=1.0,
        )
        np.testing.assert_allclose(out.log_likelihood, -1e5, rtol=1e-9)

    def test_eta_rule_uses_segment_length(self):
        """Observation-shortened segments draw proportionally fewer points."""
        obs = filters.ObservationSet(np.array([0.05]), np.array([[0.0]]), 4.0)
        out = run_cont(obs, 2.0, 400, make_stream(14))
        assert np.isfinite(out.log_likelihood)


class TestSignedPolicy:
    def test_no_negatives_means_unit_correction(self):
        obs = filters.ObservationSet.empty(1.0)
        out = run_cont(obs, 0.05, 200, make_stream(15), lipschitz=5.0, policy="signed")
        assert out.negative_count == 0
        assert out.sign_correction == 1.0
        np.testing.assert_allclose(filters.signed_likelihood_estimate(out), out.likelihood)

    def test_constant_rate_signed_exact(self):
        out = filters.run_continuous_pf(
            BENCH["spec"], IntensityModel.constant(3.0), BENCH["marks"],
            filters.ObservationSet.empty(1.0), EstimatorConfig(delta=0.5, lipschitz=1.0, policy="signed"),
            100, make_stream(16), BENCH["init"], lipschitz_seed=1.0,
        )
        np.testing.assert_allclose(filters.signed_likelihood_estimate(out), math.exp(-3.0), rtol=1e-12)

    def test_truncate_run_refuses_signed_estimate(self):
        out = run_cont(filters.ObservationSet.empty(1.0), 0.5, 50, make_stream(17))
        with pytest.raises(ValueError):
            filters.signed_likelihood_estimate(out)


class TestFilteredMoments:
    def test_single_particle_is_its_path(self):
        obs = filters.ObservationSet.empty(1.0)
        out = run_cont(obs, 0.25, 1, make_stream(18), store_clouds=True)
        mean, sd = filters.filtered_moments(out, 0)
        np.testing.assert_array_equal(mean, out.clouds[:, 0, 0])
        np.testing.assert_array_equal(sd, np.zeros_like(mean))

    def test_prior_recovered_without_data(self):
        """With a flat rate the filtered law is the prior marginal."""
        spec = sde.LinearSdeSpec.ornstein_uhlenbeck([2.0], [1.5])
        init = sde.InitialLaw.stationary(spec)
        out = filters.run_continuous_pf(
            spec, IntensityModel.constant(1.0), BENCH["marks"],
            filters.ObservationSet.empty(2.0), EstimatorConfig(delta=0.25, lipschitz=1.0), 4000,
            make_stream(19), init, lipschitz_seed=1.0, store_clouds=True,
        )
        mean, _ = filters.filtered_moments(out, 0)
        se = math.sqrt(0.25 / 4000)
        assert np.all(np.abs(mean - 1.5) < 4 * se + 0.02)

    def test_requires_stored_clouds(self):
        out = run_cont(filters.ObservationSet.empty(1.0), 0.5, 10, make_stream(20))
        with pytest.raises(ValueError):
            filters.filtered_moments(out, 0)


class TestFilterOutputSerialisation:
    def test_json_round_trip(self, tmp_path):
        import json

        obs = filters.ObservationSet(np.array([0.4]), np.array([[0.1]]), 1.0)
        out = run_cont(obs, 0.25, 64, make_stream(21), store_clouds=True)
        path = tmp_path / "result.json"
        out.save(path)
        loaded = json.loads(path.read_text())
        assert loaded["log_likelihood"] == out.log_likelihood
        assert loaded["diagnostics"]["negative_count"] == out.negative_count
        assert len(loaded["grid_times"]) == out.grid_times.size
        assert "node_moments" in loaded


class TestDepthEstimateDuringGaps:
    def test_filtered_depth_rises_where_arrivals_pause(self):
        """Arrival silence is evidence of a deeper (dimmer) state."""
        from coxpf import datagen
        from coxpf.observation import BornWolfParams, BornWolfPsf

        spec = sde.LinearSdeSpec.ornstein_uhlenbeck([1.0, 1.0, 4.0], [0.0, 0.0, 2.0])
        init = sde.InitialLaw.stationary(spec)
        intensity = IntensityModel.exponential_depth(55.6, 0.7)
        psf = BornWolfPsf(BornWolfParams())
        obs, _ = datagen.simulate_observations(spec, intensity, psf, 16.0, make_stream(30, "gap"), init)
        cfg = EstimatorConfig(delta=0.25, lipschitz=1.0)
        out = filters.run_continuous_pf(
            spec, intensity, psf, obs, cfg, 1500, make_stream(31), init, store_clouds=True
        )
        depth_mean, _ = filters.filtered_moments(out, 2)
        gaps = np.diff(out.grid_times)
        is_obs = out.obs_index >= 0
        # nodes sitting inside long arrival gaps vs the arrival nodes themselves
        long_gap = np.zeros_like(is_obs)
        long_gap[1:] = (~is_obs[1:]) & (gaps >= 0.249)
        assert long_gap.sum() > 5 and is_obs.sum() > 20
        assert depth_mean[long_gap].mean() > depth_mean[is_obs].mean()
