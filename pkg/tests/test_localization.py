import math
from itertools import permutations

import numpy as np
import pytest

from isac_locate.association import exhaustive_ml_oracle, feasible_associations_3bs, iter_feasible_associations
from isac_locate.errors import CollinearAnchors, EmptyFeasibleSet
from isac_locate.localization import (
    LocalizationResult,
    NoisyRangeModel,
    TargetSolver,
    gauss_newton_localize,
    hungarian_assign,
    linear_init,
    ml_localize,
    sample_noisy_ranges,
    weight_matrix,
    weighted_objective,
)
from isac_locate.models import LocalizationSettings, Scenario
from isac_locate.ranging import RangeSet, true_range_sets
from isac_locate.scenario import random_scenario

BS = [(0.0, 3.0), (5.0, 0.0), (0.0, -4.0)]
BS4 = BS + [(-4.0, -1.0)]
EXAMPLE2_TARGETS = [(-1.0, 2.0), (2.0, -1.0)]


def ranges_to(point, anchors):
    return np.linalg.norm(np.asarray(anchors) - np.asarray(point), axis=1)


def lexicographic_reference(ranges, anchors, sigma, delta0):
    """Smallest Gamma over G^(3) with three BSs; ties keep the earliest candidate."""
    k = len(ranges[0])
    solver = TargetSolver(anchors, ranges, weight_matrix(sigma, 3, k))
    best = (math.inf, None)
    for rows in iter_feasible_associations(ranges, anchors, delta0):
        gamma = sum(solver.solve(tuple(int(v) for v in rows[:, j])).objective for j in range(k))
        if gamma < best[0]:
            best = (gamma, rows)
    return best


# --- Test range model ---

def test_noisy_range_model_weights():
    model = NoisyRangeModel.homogeneous(0.5, 3, 2)
    np.testing.assert_allclose(model.weights, np.full((3, 2), 4.0))
    np.testing.assert_allclose(weight_matrix(model, 3, 2), model.weights)
    np.testing.assert_allclose(weight_matrix(0.5, 3, 2), model.weights)
    with pytest.raises(ValueError):
        NoisyRangeModel.homogeneous(0.0, 3, 2)
    with pytest.raises(ValueError):
        weight_matrix(0.0, 3, 2)


def test_zero_sigma_gives_true_ranges():
    s = Scenario(bs_coords=BS, target_coords=EXAMPLE2_TARGETS, region_side=12)
    noisy = sample_noisy_ranges(s, 0.0, np.random.default_rng(0))
    for a, b in zip(noisy, true_range_sets(s)):
        assert a.ranges == pytest.approx(b.ranges)
        assert not a.flagged


def test_negative_draws_clamped_and_flagged():
    s = Scenario(bs_coords=BS, target_coords=[(0.0, 2.9)], region_side=12)
    rng = np.random.default_rng(1)
    draws = [sample_noisy_ranges(s, 50.0, rng) for _ in range(20)]
    assert any(rs.flagged for sets in draws for rs in sets)
    assert all(r >= 0 for sets in draws for rs in sets for r in rs.ranges)


def test_noisy_range_statistics():
    s = Scenario(bs_coords=BS, target_coords=[(1.0, 1.0)], region_side=12)
    rng = np.random.default_rng(2)
    draws = np.array([sample_noisy_ranges(s, 0.3, rng)[0].rank(1) for _ in range(4000)])
    assert draws.mean() == pytest.approx(math.sqrt(5), abs=0.03)
    assert draws.std() == pytest.approx(0.3, rel=0.05)


# --- Test single-target solvers ---

def test_weighted_objective_gradient_matches_finite_difference():
    anchors = np.array(BS4)
    ranges = np.array([3.0, 4.0, 5.0, 3.5])
    weights = np.array([1.0, 2.0, 0.5, 1.5])
    p = np.array([0.7, -0.4])
    value, grad = weighted_objective(p, anchors, ranges, weights)
    h = 1e-6
    fd = [
        (weighted_objective(p + h * e, anchors, ranges, weights)[0] - weighted_objective(p - h * e, anchors, ranges, weights)[0])
        / (2 * h)
        for e in np.eye(2)
    ]
    np.testing.assert_allclose(grad, fd, rtol=1e-6, atol=1e-8)
    assert value > 0


def test_gradient_matches_finite_difference_on_random_instances():
    rng = np.random.default_rng(11)
    h = 1e-4
    for _ in range(100):
        anchors = random_scenario(4, 1, 200.0, rng).bs_array
        ranges = rng.uniform(1.0, 150.0, size=4)
        weights = rng.uniform(0.5, 5.0, size=4)
        p = rng.uniform(-100.0, 100.0, size=2)
        _, grad = weighted_objective(p, anchors, ranges, weights)
        fd = [
            (weighted_objective(p + h * e, anchors, ranges, weights)[0] - weighted_objective(p - h * e, anchors, ranges, weights)[0])
            / (2 * h)
            for e in np.eye(2)
        ]
        assert np.linalg.norm(grad - fd) <= 1e-5 * max(np.linalg.norm(grad), 1.0)


def test_linear_init_exact_with_perfect_ranges():
    rng = np.random.default_rng(3)
    for _ in range(10):
        s = random_scenario(5, 1, 200.0, rng)
        point = linear_init(s.bs_array, s.distances()[:, 0])
        np.testing.assert_allclose(point, s.target_array[0], atol=1e-6)


def test_linear_init_example1_true_association():
    point = linear_init(BS, [math.sqrt(29), math.sqrt(13), 2 * math.sqrt(2)])
    np.testing.assert_allclose(point, [2.0, -2.0], atol=1e-9)


def test_linear_init_collinear_anchors():
    with pytest.raises(CollinearAnchors):
        linear_init([(0, 0), (1, 1), (2, 2)], [1.0, 1.0, 1.0])


def test_gauss_newton_converges_from_offset_start():
    ranges = ranges_to((-1.0, 2.0), BS)
    result = gauss_newton_localize(BS, ranges, np.ones(3), init=(-0.5, 1.5))
    assert result.converged
    np.testing.assert_allclose(result.point, [-1.0, 2.0], atol=1e-6)


def test_gauss_newton_objective_never_increases():
    rng = np.random.default_rng(12)
    for _ in range(50):
        s = random_scenario(4, 1, 200.0, rng)
        ranges = s.distances()[:, 0] + 0.45 * rng.standard_normal(4)
        init = rng.uniform(-100.0, 100.0, size=2)
        result = gauss_newton_localize(s.bs_array, ranges, np.full(4, 1 / 0.45**2), init)
        history = result.history
        assert history[0] == pytest.approx(weighted_objective(init, s.bs_array, ranges, np.full(4, 1 / 0.45**2))[0])
        assert history[-1] == result.objective
        assert all(b <= a for a, b in zip(history, history[1:]))


def test_gauss_newton_already_stationary():
    ranges = ranges_to((-1.0, 2.0), BS4)
    result = gauss_newton_localize(BS4, ranges, np.ones(4), init=(-1.0, 2.0))
    assert result.iterations == 0
    assert result.objective == pytest.approx(0.0, abs=1e-20)


def test_gauss_newton_iterate_on_anchor_is_perturbed():
    ranges = ranges_to((1.0, 1.0), BS4)
    result = gauss_newton_localize(BS4, ranges, np.ones(4), init=BS4[0])
    assert np.all(np.isfinite(result.point))
    assert result.objective < weighted_objective(BS4[0], BS4, ranges, np.ones(4))[0]


def test_target_solver_memoizes():
    sets = true_range_sets(Scenario(bs_coords=BS4, target_coords=EXAMPLE2_TARGETS, region_side=12))
    solver = TargetSolver(BS4, sets, weight_matrix(0.5, 4, 2))
    first = solver.solve((1, 1, 1))
    again = solver.solve((1, 1, 1))
    assert first is again
    assert solver.solves == 1


# --- Test assignment ---

def test_hungarian_identity():
    perm, cost = hungarian_assign([[0, 1], [1, 0]])
    np.testing.assert_array_equal(perm, [0, 1])
    assert cost == 0


def test_hungarian_small_cost():
    perm, cost = hungarian_assign([[1, 2], [3, 1]])
    np.testing.assert_array_equal(perm, [0, 1])
    assert cost == 2


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        cost = rng.uniform(size=(5, 5))
        _, total = hungarian_assign(cost)
        best = min(sum(cost[k, p[k]] for k in range(5)) for p in permutations(range(5)))
        assert total == pytest.approx(best)


def test_hungarian_rejects_bad_input():
    with pytest.raises(ValueError):
        hungarian_assign([[1, 2, 3], [3, 1, 2]])
    with pytest.raises(ValueError):
        hungarian_assign([[1, np.inf], [3, 1]])


# --- Test pruned ML search ---

def test_example2_three_bs_perfect_ranges():
    s = Scenario(bs_coords=BS, target_coords=EXAMPLE2_TARGETS, region_side=12)
    result = ml_localize(true_range_sets(s), BS, sigma=0.5, delta0=0.0)
    assert result.objective == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(sorted(map(tuple, result.coords.tolist())), sorted(EXAMPLE2_TARGETS), atol=1e-6)


def test_example2_with_fourth_bs():
    s = Scenario(bs_coords=BS4, target_coords=EXAMPLE2_TARGETS, region_side=12)
    result = ml_localize(true_range_sets(s), BS4, sigma=0.5, delta0=0.0)
    assert result.objective == pytest.approx(0.0, abs=1e-12)
    assert result.association.n_bs == 4
    np.testing.assert_allclose(sorted(map(tuple, result.coords.tolist())), sorted(EXAMPLE2_TARGETS), atol=1e-6)


def test_single_target_equals_plain_gauss_newton():
    s = Scenario(bs_coords=BS4, target_coords=[(1.0, 1.0)], region_side=12)
    ranges = sample_noisy_ranges(s, 0.2, np.random.default_rng(5))
    result = ml_localize(ranges, BS4, sigma=0.2, delta0=10.0)
    assert result.feasible_set_size == 1
    r = np.array([rs.rank(1) for rs in ranges])
    direct = gauss_newton_localize(BS4, r, np.full(4, 25.0), linear_init(BS4, r))
    np.testing.assert_allclose(result.coords[0], direct.point, atol=1e-8)
    assert result.objective == pytest.approx(direct.objective, rel=1e-9, abs=1e-15)


def test_empty_feasible_set_raises():
    sets = [RangeSet.from_values([5.0]), RangeSet.from_values([1.0]), RangeSet.from_values([9.0])]
    with pytest.raises(EmptyFeasibleSet):
        ml_localize(sets, BS, sigma=0.1, delta0=0.0)


def test_objective_recomputes_from_association():
    s = random_scenario(4, 3, 200.0, np.random.default_rng(7))
    ranges = sample_noisy_ranges(s, 0.45, np.random.default_rng(8))
    result = ml_localize(ranges, s.bs_array, sigma=0.45, delta0=2.0 + 6 * 0.45)
    assert result.recompute_objective(ranges, s.bs_array, 0.45) == pytest.approx(result.objective, rel=1e-9)


def test_bound_pruning_does_not_change_result():
    for seed in range(10):
        s = random_scenario(4, 3, 200.0, np.random.default_rng(100 + seed))
        ranges = sample_noisy_ranges(s, 0.45, np.random.default_rng(200 + seed))
        delta0 = 1.5 + 6 * 0.45
        pruned = ml_localize(ranges, s.bs_array, 0.45, delta0, bound_pruning=True)
        full = ml_localize(ranges, s.bs_array, 0.45, delta0, bound_pruning=False)
        assert full.candidates_evaluated == full.feasible_set_size
        assert pruned.candidates_evaluated <= full.candidates_evaluated
        np.testing.assert_array_equal(pruned.association.g, full.association.g)
        assert pruned.objective == pytest.approx(full.objective, rel=1e-12)


def test_full_search_visits_every_feasible_association():
    for seed in range(5):
        for n_bs in (3, 4):
            s = random_scenario(n_bs, 4, 200.0, np.random.default_rng(500 + seed))
            ranges = sample_noisy_ranges(s, 0.45, np.random.default_rng(600 + seed))
            delta0 = 1.5 + 6 * 0.45
            full = ml_localize(ranges, s.bs_array, 0.45, delta0, bound_pruning=False)
            assert full.feasible_set_size == len(feasible_associations_3bs(ranges, s.bs_array, delta0))
            assert full.candidates_evaluated == full.feasible_set_size


@pytest.mark.parametrize("seed", range(6))
def test_three_bs_search_matches_lexicographic_reference(seed):
    s = random_scenario(3, 4, 200.0, np.random.default_rng(700 + seed))
    ranges = sample_noisy_ranges(s, 0.45, np.random.default_rng(800 + seed))
    delta0 = 1.5 + 6 * 0.45
    result = ml_localize(ranges, s.bs_array, 0.45, delta0)
    gamma, rows = lexicographic_reference(ranges, s.bs_array, 0.45, delta0)
    np.testing.assert_array_equal(result.association.g, rows)
    assert result.objective == pytest.approx(gamma, rel=1e-9, abs=1e-12)


def test_ghost_tie_goes_to_earliest_candidate():
    s = Scenario(bs_coords=BS, target_coords=[(2.0, -2.0), (-2.0, 2.0)], region_side=12)
    sets = true_range_sets(s)
    result = ml_localize(sets, BS, sigma=0.5, delta0=0.0)
    _, rows = lexicographic_reference(sets, BS, 0.5, 0.0)
    np.testing.assert_array_equal(result.association.g, rows)


def test_bound_pruning_skips_most_of_g3_at_six_targets():
    sigma = 0.75 / math.sqrt(3)
    delta0 = 2 * 0.75 + 6 * sigma
    evaluated = g3_size = 0
    for seed in range(3):
        s = random_scenario(4, 6, 240.0, np.random.default_rng(20 + seed))
        ranges = sample_noisy_ranges(s, sigma, np.random.default_rng(30 + seed))
        result = ml_localize(ranges, s.bs_array, sigma, delta0)
        evaluated += result.candidates_evaluated
        g3_size += sum(1 for _ in iter_feasible_associations(ranges, s.bs_array, delta0))
    assert evaluated * 10 <= g3_size


@pytest.mark.parametrize("trials", [40, pytest.param(200, marks=pytest.mark.slow)])
def test_oracle_never_worse_than_pruned_search(trials):
    agree = 0
    for seed in range(trials):
        s = random_scenario(4, 3, 200.0, np.random.default_rng(300 + seed))
        ranges = sample_noisy_ranges(s, 0.45, np.random.default_rng(400 + seed))
        pruned = ml_localize(ranges, s.bs_array, 0.45, 1.5 + 6 * 0.45)
        oracle = exhaustive_ml_oracle(ranges, s.bs_array, 0.45)
        assert oracle.objective <= pruned.objective * (1 + 1e-9) + 1e-12
        agree += np.array_equal(oracle.association.g, pruned.association.g)
    assert agree >= 0.95 * trials


def test_localization_frame_columns():
    s = Scenario(bs_coords=BS4, target_coords=EXAMPLE2_TARGETS, region_side=12)
    result = ml_localize(true_range_sets(s), BS4, sigma=0.5, delta0=0.0)
    frame = result.to_frame(s.target_array, trial=3)
    assert list(frame.columns) == ["trial", "target", "x_true", "y_true", "x_est", "y_est", "objective", "association"]
    assert set(frame["trial"]) == {3}
    assert isinstance(result, LocalizationResult)


def test_settings_defaults_follow_bandwidth():
    settings = LocalizationSettings()
    assert settings.resolve_sigma(0.75) == pytest.approx(0.75 / math.sqrt(3))
    assert settings.resolve_delta0(0.75, 0.5) == pytest.approx(1.5 + 3.0)
    assert LocalizationSettings(delta0=1.0).resolve_delta0(0.75, 0.5) == 1.0
