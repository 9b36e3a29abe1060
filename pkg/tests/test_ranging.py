import math

import numpy as np
import pytest

from isac_locate.errors import NonConvergence, TapOutOfRange
from isac_locate.models import OfdmParams, RangingSettings, Scenario
from isac_locate.ofdm import observe_all
from isac_locate.ranging import (
    RangeSet,
    default_lambda,
    detect_support,
    estimate_noise_level,
    estimate_range_set,
    extract_range_set,
    kkt_residual,
    lasso_estimate,
    least_squares_estimate,
    quantized_range_sets,
    range_midpoint,
    true_range_sets,
)
from isac_locate.retry import RelaxationConfig, retry_relaxed
from isac_locate.scenario import TapVector, delay_tap, random_scenario

EXAMPLE1 = Scenario(bs_coords="0,3; 5,0; 0,-4", target_coords="2,-2; -2,2", region_side=12)


def small_params(**kw):
    base = dict(n_subcarriers=512, subcarrier_spacing=125e3, cp_length=40, max_paths=32, tx_power=1.0)
    base.update(kw)
    return OfdmParams(**base)


def single_bs_observation(h, params, seed=0, noiseless=False):
    params = params.with_allocation([list(range(params.n_subcarriers))])
    (obs,) = observe_all([TapVector(h)], params, np.random.default_rng(seed), noiseless=noiseless)
    return obs


# --- Test range sets ---

def test_range_set_descending_with_rank_access():
    rs = RangeSet.from_values([1.0, 3.0, 2.0])
    assert rs.ranges == (3.0, 2.0, 1.0)
    assert rs.rank(1) == 3.0 and rs.rank(3) == 1.0
    with pytest.raises(IndexError):
        rs.rank(4)


def test_range_set_ties_break_on_tap():
    rs = RangeSet.from_values([2.0, 2.0], taps=[9, 4])
    assert rs.source_taps == (4, 9)


def test_empty_range_set_is_flagged():
    rs = extract_range_set(set(), small_params())
    assert len(rs) == 0 and rs.flagged


def test_extract_range_set_orders_by_midpoint():
    params = OfdmParams()
    rs = extract_range_set({5, 12}, params)
    assert rs.rank(1) == pytest.approx(range_midpoint(12, params))
    assert rs.rank(2) == pytest.approx(range_midpoint(5, params))
    assert rs.taps == {5, 12}


def test_example1_perfect_range_sets():
    sets = true_range_sets(EXAMPLE1)
    assert sets[0].ranges == pytest.approx((math.sqrt(29), math.sqrt(5)))
    assert sets[1].ranges == pytest.approx((math.sqrt(53), math.sqrt(13)))
    assert sets[2].ranges == pytest.approx((2 * math.sqrt(10), 2 * math.sqrt(2)))


# --- Test midpoints ---

@pytest.mark.parametrize(
    "n, df, expected",
    [(3200, 31.25e3, 0.75), (3200, 125e3, 0.1875)],
)
def test_delta_d_for_bandwidth(n, df, expected):
    params = OfdmParams(n_subcarriers=n, subcarrier_spacing=df)
    assert params.delta_d == pytest.approx(expected)


def test_first_tap_midpoint():
    assert range_midpoint(1, OfdmParams()) == pytest.approx(0.7575757575, rel=1e-9)


def test_midpoint_bounds():
    params = OfdmParams()
    with pytest.raises(TapOutOfRange):
        range_midpoint(0, params)
    with pytest.raises(TapOutOfRange):
        range_midpoint(201, params)
    assert range_midpoint(201, params, check_cp=False) > range_midpoint(200, params)


def test_quantized_ranges_within_delta_d():
    params = OfdmParams(n_subcarriers=3200, subcarrier_spacing=31.25e3)
    rng = np.random.default_rng(0)
    s = random_scenario(4, 3, 240.0, rng)
    for rs, truth in zip(quantized_range_sets(s, params), s.distances()):
        np.testing.assert_array_less(np.abs(rs.values - np.sort(truth)[::-1]), params.delta_d + 1e-9)


# --- Test support detection ---

def test_support_exact_sparse():
    h = np.zeros(10)
    h[[2, 7]] = [1.0, 0.5]
    assert detect_support(h, tau_abs=0.0, rho=1e-3) == {3, 8}


def test_support_all_zero():
    assert detect_support(np.zeros(10)) == set()


def test_support_relative_threshold():
    assert detect_support(np.array([1.0, 0.004, 0.0]), rho=0.01) == {1}


def test_support_absolute_floor():
    assert detect_support(np.array([1.0, 0.4, 0.1]), tau_abs=0.3, rho=0.0) == {1, 2}


def test_default_relative_floor_keeps_distant_echoes():
    # 1/d^2 gains: a target at 100 m against one at 1 m
    h = np.zeros(200, dtype=complex)
    h[[0, 65]] = [1.0, 1e-4j]
    assert detect_support(h) == {1, 66}
    assert RangingSettings().support_rel_threshold < 1e-4


# --- Test LASSO ---

def test_lambda_zero_exact_recovery():
    """lam = 0 with |N_m| >= L is the closed-form least-squares estimate."""
    params = small_params()
    h = np.zeros(32, dtype=complex)
    h[4] = 0.3 - 0.4j
    obs = single_bs_observation(h, params, noiseless=True)
    result = lasso_estimate(obs, 0.0)
    assert np.max(np.abs(result.taps - h)) < 1e-8
    np.testing.assert_allclose(least_squares_estimate(obs), result.taps, atol=1e-12)


def test_zero_observation_gives_zero_taps():
    params = small_params()
    obs = single_bs_observation(np.zeros(32, dtype=complex), params, noiseless=True)
    result = lasso_estimate(obs, 1.0)
    assert not np.any(result.taps)
    assert result.converged


def test_lasso_negative_lambda_rejected():
    obs = single_bs_observation(np.zeros(32, dtype=complex), small_params(), noiseless=True)
    with pytest.raises(ValueError):
        lasso_estimate(obs, -1.0)


def test_lasso_converges_with_small_kkt_residual():
    params = small_params(noise_power=1e-3)
    h = np.zeros(32, dtype=complex)
    h[[3, 20]] = [0.05, -0.03j]
    obs = single_bs_observation(h, params, seed=3)
    lam = default_lambda(obs)
    result = lasso_estimate(obs, lam, tol=1e-8)
    assert result.converged
    assert result.kkt_residual <= 1e-8
    # monotone variant: objective never increases
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(result.objective_history, result.objective_history[1:]))


def test_lasso_strict_raises_when_budget_exhausted():
    params = small_params(noise_power=1e-3)
    h = np.zeros(32, dtype=complex)
    h[[3, 20]] = [0.05, -0.03j]
    obs = single_bs_observation(h, params, seed=3)
    with pytest.raises(NonConvergence):
        lasso_estimate(obs, default_lambda(obs), tol=1e-14, max_iter=1, strict=True)
    loose = lasso_estimate(obs, default_lambda(obs), tol=1e-14, max_iter=1)
    assert not loose.converged


def test_kkt_residual_zero_at_least_squares_solution():
    params = small_params(noise_power=1e-3)
    h = np.zeros(32, dtype=complex)
    h[7] = 0.2
    obs = single_bs_observation(h, params, seed=1)
    a = obs.sensing_matrix
    h_ls = least_squares_estimate(obs)
    assert kkt_residual(h_ls, a.conj().T @ a, a.conj().T @ obs.y_tilde, 0.0) < 1e-9


def test_noise_level_estimate():
    """sigma_h estimates the per-tap LS noise std sqrt(sigma^2 / (p |N_m|))."""
    params = small_params(noise_power=1e-2, cp_length=232, max_paths=200)
    obs = single_bs_observation(np.zeros(200, dtype=complex), params, seed=7)
    expected = math.sqrt(1e-2 / 512)
    assert estimate_noise_level(obs) == pytest.approx(expected, rel=0.2)


@pytest.mark.parametrize("trials", [200, pytest.param(500, marks=pytest.mark.slow)])
def test_support_recovery_at_20db(trials):
    """K = 2 taps at 20 dB per-tap SNR: exact support in >= 99% of trials."""
    params = small_params(noise_power=1e-2)
    sigma_h = math.sqrt(1e-2 / 512)
    hits = 0
    for seed in range(trials):
        rng = np.random.default_rng(1000 + seed)
        taps = rng.choice(32, size=2, replace=False)
        h = np.zeros(32, dtype=complex)
        h[taps] = 10.0 * sigma_h * np.exp(2j * np.pi * rng.uniform(size=2))
        obs = single_bs_observation(h, params, seed=seed)
        est = estimate_range_set(obs, params)
        hits += est.support == {int(t) + 1 for t in taps}
    assert hits >= 0.99 * trials


def test_noiseless_range_set_is_exact_midpoints():
    params = small_params()
    h = np.zeros(32, dtype=complex)
    h[[2, 9, 30]] = [1e-3, 2e-4j, -5e-5]
    obs = single_bs_observation(h, params, noiseless=True)
    est = estimate_range_set(obs, params, RangingSettings(noiseless=True))
    assert est.support == {3, 10, 31}
    assert est.range_set.ranges == pytest.approx(tuple(range_midpoint(l, params) for l in (31, 10, 3)))
    for l in est.support:
        assert delay_tap(range_midpoint(l, params), params) == l


def test_unconverged_lasso_is_reported_not_raised():
    params = small_params(noise_power=1e-3)
    h = np.zeros(32, dtype=complex)
    h[[3, 20]] = [0.05, -0.03j]
    obs = single_bs_observation(h, params, seed=3)
    settings = RangingSettings(lasso_tol=1e-14, lasso_max_iter=1)
    est = estimate_range_set(obs, params, settings, relaxation=RelaxationConfig(max_attempts=2, growth=1.0))
    assert not est.lasso.converged
    assert est.lasso.iterations == 1
    assert isinstance(est.range_set, RangeSet)


# --- Test retry with relaxation ---

def test_retry_relaxed_widens_parameter():
    seen = []

    def solver(tol):
        seen.append(tol)
        if tol < 1e-5:
            raise NonConvergence("too tight")
        return tol

    assert retry_relaxed(solver, param="tol", initial=1e-8, exceptions=(NonConvergence,)) == pytest.approx(1e-4)
    assert seen == pytest.approx([1e-8, 1e-6, 1e-4])


def test_retry_relaxed_raises_last_error():
    def solver(delta0):
        raise NonConvergence(f"delta0={delta0}")

    config = RelaxationConfig(max_attempts=2, growth=2.0, floor=1.0)
    with pytest.raises(NonConvergence, match="delta0=2.0"):
        retry_relaxed(solver, param="delta0", initial=0.5, config=config, exceptions=(NonConvergence,))
