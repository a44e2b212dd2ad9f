"""Generative Euler scheme: oracle coefficients, truncation bounds,
replayability, and consistency with the model-query surfaces."""

import numpy as np
import pytest

from itogen import model as mdl
from itogen.errors import ConfigError
from itogen.generate import (GenerationRun, OracleCoefficients,
                             default_truncation_level, generate,
                             generate_continuations)
from itogen.evaluate import estimate_gbm
from itogen.sde import ObservationSequence, _draw_path_noise, observe, simulate
from itogen.training import TrainConfig, init_bundle
from itogen.util import derive_seed
from test_sde import gbm_spec


def history_at_origin(x0=1.0, d=1):
    return ObservationSequence(time_indices=np.array([0]),
                               times=np.array([0.0]),
                               values=np.full((1, d), x0),
                               masks=np.ones((1, d)))


def gbm_oracle(mu=2.0, sigma=0.3):
    return OracleCoefficients(
        mu_fn=lambda t, x: mu * x,
        sigma_sq_fn=lambda t, x: (sigma ** 2 * x ** 2)[:, :, None])


def run_cfg(**kw):
    defaults = dict(start_history=history_at_origin(), delta=0.01,
                    truncation=100.0, horizon=1.0, n_paths=200, seed=7)
    defaults.update(kw)
    return GenerationRun(**defaults)


class TestOracleGeneration:
    def test_zero_coefficients_give_constant_paths(self):
        oracle = OracleCoefficients(
            mu_fn=lambda t, x: np.zeros_like(x),
            sigma_sq_fn=lambda t, x: np.zeros(x.shape + (1,)))
        res = generate(oracle, run_cfg(n_paths=20, horizon=0.1))
        assert res.n_invalid == 0
        assert np.all(res.dataset.values == 1.0)

    def test_gbm_oracle_reproduces_parameters(self):
        res = generate(gbm_oracle(), run_cfg(n_paths=2000, seed=11))
        assert res.n_invalid == 0
        mu, sigma = estimate_gbm(res.dataset)
        assert abs(mu - 2.0) <= 0.05
        assert abs(sigma - 0.3) <= 0.01

    def test_constant_coefficients_match_arithmetic_brownian_motion(self):
        a, s = 0.7, 0.5
        oracle = OracleCoefficients(
            mu_fn=lambda t, x: np.full_like(x, a),
            sigma_sq_fn=lambda t, x: np.full(x.shape + (1,), s ** 2))
        res = generate(oracle, run_cfg(n_paths=4000, seed=3))
        x_T = res.dataset.values[:, -1, 0]
        se_mean = x_T.std(ddof=1) / np.sqrt(len(x_T))
        assert abs(x_T.mean() - (1.0 + a)) < 4 * se_mean
        var_true = s ** 2
        assert abs(x_T.var(ddof=1) - var_true) \
            < 4 * var_true * np.sqrt(2 / len(x_T))

    def test_truncation_bounds_every_applied_coefficient(self):
        oracle = OracleCoefficients(
            mu_fn=lambda t, x: np.full_like(x, 123.0),
            sigma_sq_fn=lambda t, x: np.full(x.shape + (1,), 456.0))
        res = generate(oracle, run_cfg(truncation=2.0, n_paths=50,
                                       horizon=0.1,
                                       record_estimates=True))
        assert np.max(np.abs(res.mu_log)) <= 2.0
        assert np.max(np.abs(res.sigma_log)) <= 2.0
        assert res.info["truncated_mu"] > 0
        assert res.info["truncated_sigma"] > 0

    def test_seed_determinism_and_path_exchangeability(self):
        big = generate(gbm_oracle(), run_cfg(n_paths=40, horizon=0.2))
        small = generate(gbm_oracle(), run_cfg(n_paths=8, horizon=0.2))
        assert np.array_equal(big.dataset.values[:8], small.dataset.values)
        again = generate(gbm_oracle(), run_cfg(n_paths=40, horizon=0.2))
        assert np.array_equal(big.dataset.values, again.dataset.values)

    def test_recorded_noise_replays_the_exact_path(self):
        run = run_cfg(n_paths=15, horizon=0.3, record_estimates=True)
        res = generate(gbm_oracle(), run)
        eps = _draw_path_noise(derive_seed(run.seed, "generate"), run.n_paths,
                               30, 1)
        x = res.dataset.values[:, 0, 0].copy()
        for m in range(30):
            mu = res.mu_log[m][:, 0]
            root = np.sqrt(np.clip(res.sigma_log[m][:, 0, 0], 0, None))
            x = x + mu * run.delta + root * np.sqrt(run.delta) * eps[:, m, 0]
            assert np.max(np.abs(x - res.dataset.values[:, m + 1, 0])) < 1e-12

    def test_validation_errors(self):
        with pytest.raises(ConfigError):
            generate(gbm_oracle(), run_cfg(horizon=0.005))
        with pytest.raises(ConfigError):
            generate(gbm_oracle(), run_cfg(truncation=0.0))
        with pytest.raises(ConfigError):
            generate("not a source", run_cfg())


class TestModelGeneration:
    def make_bundle(self, scheme, seed=1):
        cfg = TrainConfig(scheme=scheme, latent_dim=12, hidden=8, seed=seed,
                          epochs=0)
        return cfg, init_bundle(cfg, d=1)

    def test_scheme_mismatch_rejected(self):
        _, bundle = self.make_bundle("joint-instant")
        with pytest.raises(ConfigError):
            generate(bundle, run_cfg(), grid_dt=0.01, scheme="base")
        with pytest.raises(ConfigError):
            generate(bundle, run_cfg(delta=0.015), grid_dt=0.01)

    def test_instant_first_step_matches_forward_readout(self):
        _, bundle = self.make_bundle("joint-instant")
        params = bundle.models["joint"]
        res = generate(bundle, run_cfg(n_paths=3, horizon=0.05,
                                       record_estimates=True,
                                       truncation=1e6), grid_dt=0.01)
        times = np.array([0.0])
        traj = mdl.forward(params, history_at_origin(), times)
        g = traj.outputs[0]
        mu0 = g[params.head_slice("x")]
        g2 = g[params.head_slice("z")].reshape(1, 1)
        sig0 = (g2 @ g2.T)[0, 0]
        assert res.mu_log[0][0, 0] == pytest.approx(mu0[0], rel=1e-12)
        assert res.sigma_log[0][0, 0, 0] == pytest.approx(sig0, rel=1e-12)

    def test_base_first_step_matches_predict_window_quotients(self):
        _, bundle = self.make_bundle("base", seed=4)
        res = generate(bundle, run_cfg(n_paths=2, horizon=0.05,
                                       record_estimates=True,
                                       truncation=1e6), grid_dt=0.01)
        drift = bundle.models["drift"]
        diff = bundle.models["diff"]
        _, g1_win = mdl.predict_window(drift, history_at_origin(), 0.0,
                                       0.01, 0.01)
        _, g2_win = mdl.predict_window(diff, history_at_origin(), 0.0,
                                       0.01, 0.01)
        mu_exp = (g1_win[-1][0] - 1.0) / 0.01
        g2 = g2_win[-1].reshape(1, 1)
        sig_exp = (g2 @ g2.T)[0, 0] / 0.01
        assert res.mu_log[0][0, 0] == pytest.approx(mu_exp, rel=1e-10)
        assert res.sigma_log[0][0, 0, 0] == pytest.approx(sig_exp, rel=1e-10)

    def test_generated_points_are_fully_observed_appends(self):
        _, bundle = self.make_bundle("joint-instant", seed=2)
        res = generate(bundle, run_cfg(n_paths=4, horizon=0.03,
                                       truncation=50.0), grid_dt=0.01)
        assert res.dataset.values.shape == (4, 4, 1)
        assert np.all(np.isfinite(res.dataset.values))


class TestContinuations:
    def test_deterministic_when_sigma_zero(self):
        oracle = OracleCoefficients(
            mu_fn=lambda t, x: 2.0 * x,
            sigma_sq_fn=lambda t, x: np.zeros(x.shape + (1,)))
        res = generate_continuations(oracle, history_at_origin(), 5, 0.01,
                                     100.0, 0.5, seed=3)
        assert np.all(res.dataset.values == res.dataset.values[0])
        expected = 1.02 ** 50
        assert res.dataset.values[0, -1, 0] == pytest.approx(expected)

    def test_all_continuations_share_the_history_start(self):
        ds = simulate(gbm_spec(), 1.0, 0.01, 1, seed=5)
        obs = observe(ds, 0.2, seed=6)[0].truncated(0.55)
        last = obs.times[-1]
        res = generate_continuations(gbm_oracle(), obs, 50, 0.01, 100.0,
                                     1.0, seed=9)
        assert res.dataset.times[0] == pytest.approx(last)
        start = res.dataset.values[:, 0, 0]
        assert np.all(start == start[0])
        assert start[0] == pytest.approx(obs.values[-1, 0])
        # independent noise afterwards
        assert np.std(res.dataset.values[:, -1, 0]) > 0

    def test_continuation_fan_matches_conditional_gbm_moments(self):
        # with the exact coefficients, the fan from a fixed history should
        # spread with time and track the conditional GBM mean/variance
        ds = simulate(gbm_spec(), 1.0, 0.01, 1, seed=5)
        obs = observe(ds, 0.2, seed=6)[0].truncated(0.55)
        x_s = obs.values[-1, 0]
        s = obs.times[-1]
        res = generate_continuations(gbm_oracle(), obs, 1000, 0.01, 100.0,
                                     1.0, seed=17)
        vals = res.dataset.values[:, :, 0]
        assert np.all(vals[:, 0] == vals[0, 0])
        spreads = vals.std(axis=0)
        assert spreads[-1] > spreads[len(spreads) // 2] > spreads[1]
        for pos in (20, 45):
            dt_ahead = res.dataset.times[pos] - s
            cond_mean = x_s * np.exp(2.0 * dt_ahead)
            cond_var = x_s ** 2 * np.exp(4.0 * dt_ahead) \
                * (np.exp(0.09 * dt_ahead) - 1.0)
            col = vals[:, pos]
            se = col.std(ddof=1) / np.sqrt(len(col))
            assert abs(col.mean() - cond_mean) < 4 * se + 0.01 * cond_mean
            assert abs(col.var(ddof=1) - cond_var) \
                < 5 * cond_var * np.sqrt(2.0 / len(col)) + 0.05 * cond_var


def test_default_truncation_level_covers_quotient_range():
    ds = simulate(gbm_spec(), 1.0, 0.01, 50, seed=13)
    obs = observe(ds, 0.1, seed=14)
    level = default_truncation_level(obs, ds.times, 1)
    assert level >= 1.0
    # generous: 10x the largest observed quotient
    from itogen.losses import build_targets
    from itogen.model import InputLayout
    tb = build_targets(obs, ds.times, InputLayout(1), "instant")
    peak = max(float(np.max(np.abs(c["zq"]))) for c in tb.cells.values())
    assert level == pytest.approx(10.0 * peak)
