import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgelab import market
from hedgelab.market import (
    DEFAULT_PARAMS,
    FormatError,
    GarchParams,
    Measure,
    PathSet,
    log_likelihood,
    simulate_p,
    simulate_q,
    step_variance_p,
)


class TestGarchParams:
    def test_defaults_match_headline_configuration(self):
        p = DEFAULT_PARAMS
        assert (p.mu, p.omega, p.alpha, p.gamma, p.beta) == (0.0006, 1e-6, 0.11, 0.20, 0.78)
        assert (p.r, p.q) == (0.0266, 0.0177)
        assert p.lambda_ == 1.0 / 252
        assert p.persistence == pytest.approx(0.99)
        assert p.stationary_vol == pytest.approx(0.01, rel=1e-9)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            GarchParams(mu=0, omega=0, alpha=0.1, gamma=0.1, beta=0.5, r=0, q=0)
        with pytest.raises(ValueError):
            GarchParams(mu=0, omega=1e-6, alpha=-0.1, gamma=0.3, beta=0.5, r=0, q=0)
        with pytest.raises(ValueError):
            GarchParams(mu=0, omega=1e-6, alpha=0.1, gamma=-0.2, beta=0.5, r=0, q=0)
        with pytest.raises(ValueError):
            GarchParams(mu=math.nan, omega=1e-6, alpha=0.1, gamma=0.0, beta=0.5, r=0, q=0)

    def test_nonstationary_warns_but_constructs(self):
        with pytest.warns(UserWarning, match="non-stationary"):
            GarchParams(mu=0, omega=1e-6, alpha=0.3, gamma=0.2, beta=0.7, r=0, q=0)


class TestStepVariance:
    def test_zero_innovation_kills_arch_term(self):
        out = step_variance_p(1e-4, 0.0, DEFAULT_PARAMS)
        assert out == pytest.approx(1e-6 + 0.78e-4, rel=1e-12)

    def test_negative_innovation_loads_leverage(self):
        out = step_variance_p(1e-4, -1.0, DEFAULT_PARAMS)
        assert out == pytest.approx(1e-6 + 1e-4 * 0.31 + 0.78e-4, rel=1e-12)

    def test_positive_innovation_symmetric_load_only(self):
        out = step_variance_p(1e-4, 1.0, DEFAULT_PARAMS)
        assert out == pytest.approx(1e-6 + 1e-4 * 0.11 + 0.78e-4, rel=1e-12)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            step_variance_p(1e-4, math.inf, DEFAULT_PARAMS)
        with pytest.raises(ValueError):
            step_variance_p(math.nan, 0.0, DEFAULT_PARAMS)
        with pytest.raises(ValueError):
            step_variance_p(-1e-4, 0.0, DEFAULT_PARAMS)

    @given(
        sigma2=st.floats(1e-10, 1e2),
        eps=st.floats(-50.0, 50.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_positivity(self, sigma2, eps):
        assert step_variance_p(sigma2, eps, DEFAULT_PARAMS) > 0.0

    @given(
        sigma2=st.floats(1e-8, 1.0),
        eps=st.floats(1e-6, 10.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_leverage_asymmetry(self, sigma2, eps):
        down = step_variance_p(sigma2, -eps, DEFAULT_PARAMS)
        up = step_variance_p(sigma2, eps, DEFAULT_PARAMS)
        expected = DEFAULT_PARAMS.gamma * sigma2 * eps * eps
        # cancellation noise floor: a few ulps of the beta*sigma2 term
        assert down - up == pytest.approx(expected, rel=1e-9, abs=1e-13 * sigma2)


class TestSimulateP:
    def test_zero_innovations_are_pure_drift(self, params):
        eps = np.zeros((1, 10))
        ps = simulate_p(params, 100.0, 0.01, 10, 1, seed=0, innovations=eps)
        expected = 100.0 * np.exp(params.mu * np.arange(11))
        np.testing.assert_allclose(ps.prices[0], expected, rtol=1e-12)

    def test_seed_determinism_bit_exact(self, params):
        a = simulate_p(params, 100.0, 0.01, 21, 500, seed=9)
        b = simulate_p(params, 100.0, 0.01, 21, 500, seed=9)
        np.testing.assert_array_equal(a.prices, b.prices)
        np.testing.assert_array_equal(a.vols, b.vols)

    def test_worker_count_invariance(self, params):
        a = simulate_p(params, 100.0, 0.01, 8, 70000, seed=4, workers=1)
        b = simulate_p(params, 100.0, 0.01, 8, 70000, seed=4, workers=4)
        np.testing.assert_array_equal(a.prices, b.prices)

    def test_mean_log_return_matches_drift(self, params):
        ps = simulate_p(params, 100.0, 0.01, 63, 30000, seed=42)
        r = np.diff(np.log(ps.prices), axis=1)
        se = r.std() / math.sqrt(r.size)
        assert abs(r.mean() - params.mu) < 3 * se

    def test_invariants(self, params, small_p_paths):
        small_p_paths.validate()
        assert small_p_paths.measure is Measure.P

    def test_preconditions(self, params):
        with pytest.raises(ValueError):
            simulate_p(params, 100.0, 0.01, 0, 5, seed=1)
        with pytest.raises(ValueError):
            simulate_p(params, 100.0, 0.0, 5, 5, seed=1)
        with pytest.raises(ValueError):
            simulate_p(params, -1.0, 0.01, 5, 5, seed=1)


class TestSimulateQ:
    def test_discounted_price_is_martingale(self, params):
        qs = simulate_q(params, 100.0, 0.011, 63, 100_000, seed=77)
        for t in (1, 21, 63):
            x = qs.prices[:, t] * math.exp((params.q - params.r) * t * params.lambda_)
            se = x.std() / math.sqrt(x.size)
            assert abs(x.mean() - 100.0) < 4 * se, f"t={t}"

    def test_eta_equals_sigma_when_drift_is_carry_plus_half_var(self, params):
        # mu = (r-q)*lambda + sigma^2/2 makes the innovation shift equal sigma,
        # so the variance recursion sees shock = eps - sigma and its indicator
        # flips exactly at eps = sigma.
        sigma1 = 0.02
        carry = (params.r - params.q) * params.lambda_
        from dataclasses import replace

        special = replace(params, mu=carry + sigma1**2 / 2.0)
        for eps_val in (sigma1 - 1e-6, sigma1 + 1e-6, -1.0, 1.0):
            eps = np.array([[eps_val]])
            qs = simulate_q(special, 100.0, sigma1, 1, 1, seed=0, innovations=eps)
            expected = step_variance_p(sigma1**2, eps_val - sigma1, special)
            assert qs.vols[0, 1] ** 2 == pytest.approx(expected, rel=1e-12)

    def test_eta_zero_when_drift_is_carry_minus_half_var(self, params):
        # With mu = (r-q)*lambda - sigma^2/2 the shift vanishes and the Q
        # variance recursion coincides with the physical one on the same draws.
        sigma1 = 0.015
        carry = (params.r - params.q) * params.lambda_
        from dataclasses import replace

        special = replace(params, mu=carry - sigma1**2 / 2.0)
        eps = np.array([[0.37]])
        qs = simulate_q(special, 100.0, sigma1, 1, 1, seed=0, innovations=eps)
        expected = step_variance_p(sigma1**2, 0.37, special)
        assert qs.vols[0, 1] ** 2 == pytest.approx(expected, rel=1e-12)

    def test_seed_determinism(self, params):
        a = simulate_q(params, 100.0, 0.01, 13, 300, seed=5)
        b = simulate_q(params, 100.0, 0.01, 13, 300, seed=5)
        np.testing.assert_array_equal(a.prices, b.prices)

    def test_zero_sigma_rejected(self, params):
        with pytest.raises(ValueError):
            simulate_q(params, 100.0, 0.0, 5, 5, seed=1)


class TestLogLikelihood:
    def test_single_return_at_mean(self, params):
        ll = log_likelihood(params, np.array([params.mu]), 0.01)
        assert ll == pytest.approx(-0.5 * math.log(2 * math.pi * 1e-4), rel=1e-12)

    def test_generating_params_beat_perturbed(self, params):
        # consistency is asymptotic: 30k points separate +-20% perturbations
        ps = simulate_p(params, 100.0, params.stationary_vol, 30_000, 1, seed=123)
        returns = np.diff(np.log(ps.prices[0]))
        ll_true = log_likelihood(params, returns, params.stationary_vol)
        from dataclasses import replace

        for field_name in ("alpha", "beta", "omega"):
            for factor in (0.8, 1.2):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")  # perturbation may be non-stationary
                    cand = replace(params, **{field_name: getattr(params, field_name) * factor})
                if cand.persistence >= 1.0:
                    continue
                ll_alt = log_likelihood(cand, returns, cand.stationary_vol)
                assert ll_true > ll_alt, f"{field_name} x{factor}"

    def test_empty_and_nonfinite_rejected(self, params):
        with pytest.raises(ValueError):
            log_likelihood(params, np.array([]), 0.01)
        with pytest.raises(ValueError):
            log_likelihood(params, np.array([np.nan]), 0.01)
        with pytest.raises(ValueError):
            log_likelihood(params, np.array([0.01]), 0.0)


class TestPathSetIO:
    def test_roundtrip_bit_exact(self, small_p_paths, tmp_path):
        f = tmp_path / "paths.hlps"
        small_p_paths.save(f)
        loaded = PathSet.load(f)
        np.testing.assert_array_equal(loaded.prices, small_p_paths.prices)
        np.testing.assert_array_equal(loaded.vols, small_p_paths.vols)
        assert loaded.measure is small_p_paths.measure
        assert loaded.seed == small_p_paths.seed
        assert loaded.s0 == small_p_paths.s0
        assert loaded.sigma1 == small_p_paths.sigma1

    def test_bad_magic_rejected(self, small_p_paths, tmp_path):
        f = tmp_path / "paths.hlps"
        small_p_paths.save(f)
        raw = bytearray(f.read_bytes())
        raw[:4] = b"XXXX"
        f.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="bad magic"):
            PathSet.load(f)

    def test_truncated_rejected(self, small_p_paths, tmp_path):
        f = tmp_path / "paths.hlps"
        small_p_paths.save(f)
        f.write_bytes(f.read_bytes()[:100])
        with pytest.raises(FormatError):
            PathSet.load(f)

    def test_csv_export(self, tiny_p_paths, tmp_path):
        f = tmp_path / "paths.csv"
        tiny_p_paths.to_csv(f)
        lines = f.read_text().splitlines()
        assert lines[0] == "path_id,t,price,vol"
        assert len(lines) == 1 + tiny_p_paths.n_paths * (tiny_p_paths.n_steps + 1)
        first = lines[1].split(",")
        assert float(first[2]) == tiny_p_paths.prices[0, 0]

    def test_take(self, tiny_p_paths):
        sub = tiny_p_paths.take(np.array([3, 1]))
        assert sub.n_paths == 2
        np.testing.assert_array_equal(sub.prices[0], tiny_p_paths.prices[3])


class TestReturnsCsv:
    def test_with_and_without_header(self, tmp_path):
        f1 = tmp_path / "r1.csv"
        f1.write_text("ret\n0.01\n-0.02\n")
        np.testing.assert_allclose(market.read_returns_csv(f1), [0.01, -0.02])
        f2 = tmp_path / "r2.csv"
        f2.write_text("0.003\n0.004\n")
        np.testing.assert_allclose(market.read_returns_csv(f2), [0.003, 0.004])

    def test_empty_rejected(self, tmp_path):
        f = tmp_path / "empty.csv"
        f.write_text("")
        with pytest.raises(ValueError):
            market.read_returns_csv(f)

    def test_non_numeric_mid_file_rejected(self, tmp_path):
        f = tmp_path / "bad.csv"
        f.write_text("0.01\nbogus\n")
        with pytest.raises(ValueError):
            market.read_returns_csv(f)
