from __future__ import annotations

import math
from functools import partial

import numpy as np
import pytest

from startup_options.errors import ParameterError
from startup_options.exit_post import solve_post_exit, value_post
from startup_options.exit_pre import (
    CaseTag,
    classify,
    critical_alpha,
    critical_alpha_limit,
    h_fn,
    h_peak,
    m_fn,
    particular_middle,
    particular_upper,
    solve_pre_exit,
    value_pre,
)
from startup_options.params import ModelParams, profit_pre
from startup_options.verify import FunctionBranch, ode_residual_scan
from tests.conftest import COMMON, random_params

LAMBDA2_GRID = np.geomspace(1e-3, 1e3, 50)


def _ode_residual(params: ModelParams, region: tuple[float, float]) -> float:
    sol = solve_pre_exit(params)
    branch = FunctionBranch(partial(value_pre, sol, params), sol.breakpoints)

    def inflow(x):
        return profit_pre(x, params.profit) + params.hazards.lambda2 * np.asarray(value_post(sol.post, params, x))

    return ode_residual_scan(branch, region, params.hazards.lambda2, inflow, params.market)


def test_critical_alpha_matches_reference_value(case_one) -> None:
    assert critical_alpha(case_one) == pytest.approx(0.47, abs=0.005)


def test_classification_of_reference_scenarios(case_one, case_two) -> None:
    assert classify(case_one) is CaseTag.CASE_I
    assert classify(case_two) is CaseTag.CASE_II


def test_thresholds_match_reference_values(case_one, case_two) -> None:
    left = solve_pre_exit(case_one)
    right = solve_pre_exit(case_two)

    assert left.case is CaseTag.CASE_I
    assert left.a_star == pytest.approx(3.22, abs=0.005)
    assert right.case is CaseTag.CASE_II
    assert right.a_star == pytest.approx(5.16, abs=0.005)
    # case I abandons above a~*, case II below it
    assert left.a_star > left.post.a_tilde_star
    assert right.a_star < right.post.a_tilde_star


def test_critical_alpha_is_one_when_fixed_costs_coincide(make_params) -> None:
    assert critical_alpha(make_params(beta=10.0)) == 1.0


def test_boundary_case_abandons_at_post_competition_threshold(make_params) -> None:
    params = make_params(beta=10.0, alpha=1.0)
    sol = solve_pre_exit(params)

    assert classify(params) is CaseTag.BOUNDARY
    assert sol.case is CaseTag.BOUNDARY
    assert sol.a_star == pytest.approx(sol.post.a_tilde_star, rel=1e-9)


@pytest.mark.parametrize("lambda2", [0.05, 0.2, 1.0])
def test_both_solvers_meet_at_the_critical_alpha(make_params, lambda2) -> None:
    alpha0 = critical_alpha(make_params(lambda2=lambda2))
    below = solve_pre_exit(make_params(lambda2=lambda2, alpha=alpha0 - 1e-6))
    above = solve_pre_exit(make_params(lambda2=lambda2, alpha=alpha0 + 1e-6))

    assert below.case is CaseTag.CASE_II
    assert above.case is CaseTag.CASE_I
    for sol in (below, above):
        assert abs(sol.a_star - sol.post.a_tilde_star) < 1e-3 * sol.post.a_tilde_star


@pytest.mark.parametrize("seed", range(8))
def test_fixed_cost_below_beta_is_always_case_two(seed) -> None:
    params = random_params(seed, k_above_beta=False)

    assert classify(params) is CaseTag.CASE_II
    assert solve_pre_exit(params).a_star < solve_post_exit(params).a_tilde_star


@pytest.mark.parametrize("seed", range(5))
def test_critical_alpha_decreases_in_competitor_hazard(seed) -> None:
    params = random_params(100 + seed, k_above_beta=True, sigma=(0.05, 0.10))
    alpha0 = np.array([critical_alpha(params.with_values(lambda2=lam)) for lam in LAMBDA2_GRID])

    assert np.all(np.diff(alpha0) < 0)
    gaps = np.abs(alpha0 - critical_alpha_limit(params))
    assert np.all(np.diff(gaps) < 0)
    assert abs(critical_alpha(params.with_values(lambda2=1e5)) - critical_alpha_limit(params)) < 1e-4


def test_critical_alpha_limit_for_reference_parameters(case_one) -> None:
    limit = critical_alpha_limit(case_one)

    assert 0.0 < limit < critical_alpha(case_one)
    assert abs(critical_alpha(case_one.with_values(lambda2=1e7)) - limit) < 1e-4


def test_case_two_boundary_conditions_hold(case_two) -> None:
    sol = solve_pre_exit(case_two)

    assert len(sol.residuals) == 4
    assert max(sol.residuals) < 1e-9
    assert sol.c1 == 0.0
    assert sol.c3 * sol.a_star**sol.p1 == pytest.approx(sol.middle_p1, rel=1e-12)
    assert sol.c4 * sol.post.a_tilde_star**sol.p2 == pytest.approx(sol.middle_p2, rel=1e-12)


def test_case_one_has_single_coefficient(case_one) -> None:
    sol = solve_pre_exit(case_one)

    assert sol.c2 == sol.c3 == sol.c4 == 0.0
    assert sol.c1 * sol.a_star**sol.p1 == pytest.approx(sol.upper, rel=1e-12)
    assert sol.breakpoints == (sol.a_star,)


@pytest.mark.parametrize("fixture", ["case_one", "case_two"])
def test_value_matching_and_smooth_pasting(request, fixture) -> None:
    params = request.getfixturevalue(fixture)
    sol = solve_pre_exit(params)
    just_above = sol.a_star * (1.0 + 1e-13)

    assert abs(value_pre(sol, params, just_above)) < 1e-10
    assert abs(value_pre(sol, params, just_above, 1)) < 1e-8
    np.testing.assert_array_equal(value_pre(sol, params, [0.5 * sol.a_star, sol.a_star]), 0.0)


def test_middle_and_upper_branches_join_smoothly(case_two) -> None:
    sol = solve_pre_exit(case_two)
    top = sol.post.a_tilde_star
    below, above = top * (1.0 - 1e-11), top * (1.0 + 1e-11)

    for derivative in (0, 1):
        left = value_pre(sol, case_two, below, derivative)
        right = value_pre(sol, case_two, above, derivative)
        assert abs(left - right) < 1e-8 * max(1.0, abs(right))


@pytest.mark.parametrize("fixture", ["case_one", "case_two"])
def test_value_is_nonnegative_and_increasing(request, fixture) -> None:
    params = request.getfixturevalue(fixture)
    sol = solve_pre_exit(params)
    x = np.geomspace(0.2 * sol.a_star, 50 * sol.a_star, 400)
    values = value_pre(sol, params, x)

    assert np.all(values >= -1e-12)
    assert np.all(np.diff(values) >= -1e-12)


def test_h_bracket_is_valid_in_case_one(case_one) -> None:
    post = solve_post_exit(case_one)
    sol = solve_pre_exit(case_one)

    assert h_fn(post.a_tilde_star, case_one, post) >= 0
    assert h_peak(case_one, post) < post.a_tilde_star
    assert abs(h_fn(sol.a_star, case_one, post)) < 1e-9
    beyond = np.geomspace(h_peak(case_one, post) * 1.01, 100 * post.a_tilde_star, 200)
    assert np.all(h_fn(beyond, case_one, post, derivative=1) < 0)


def test_h_is_the_pasting_combination_of_the_particular_solution(case_one) -> None:
    post = solve_post_exit(case_one)
    sol = solve_pre_exit(case_one)
    x = np.geomspace(post.a_tilde_star, 10 * post.a_tilde_star, 20)
    combination = sol.p1 * particular_upper(case_one, post, x) - x * particular_upper(case_one, post, x, 1)

    np.testing.assert_allclose(h_fn(x, case_one, post), combination, rtol=1e-10, atol=1e-10)


def test_m_is_decreasing_with_positive_start(case_two) -> None:
    post = solve_post_exit(case_two)
    x = np.geomspace(1e-6 * post.a_tilde_star, 10 * post.a_tilde_star, 400)

    assert np.all(m_fn(x, case_two, post, derivative=1) < 0)
    assert m_fn(1e-9 * post.a_tilde_star, case_two, post) > 0
    assert m_fn(post.a_tilde_star, case_two, post) < 0


def test_h_is_undefined_without_post_competition_profit(make_params) -> None:
    with pytest.raises(ValueError):
        h_fn(5.0, make_params(alpha=0.0))


def test_alpha_zero_abandons_at_linear_root(make_params) -> None:
    params = make_params(alpha=0.0)
    m, lam2, cap_k = params.market, params.hazards.lambda2, params.profit.cap_k
    sol = solve_pre_exit(params)
    expected = sol.p1 * cap_k * (m.rho + lam2 - m.mu) / ((m.rho + lam2) * (sol.p1 - 1.0))

    assert sol.case is CaseTag.CASE_II
    assert math.isinf(sol.post.a_tilde_star)
    assert sol.a_star == pytest.approx(expected, rel=1e-12)
    assert sol.breakpoints == (sol.a_star,)
    assert abs(value_pre(sol, params, sol.a_star * (1.0 + 1e-13), 1)) < 1e-8
    # far above a*, only the killed pre-competition flow remains
    x = 1e4 * sol.a_star
    assert value_pre(sol, params, x) == pytest.approx(float(particular_middle(params, x)), rel=1e-9)


@pytest.mark.parametrize("fixture", ["case_one", "case_two"])
def test_ode_residuals_on_every_branch(request, fixture) -> None:
    params = request.getfixturevalue(fixture)
    sol = solve_pre_exit(params)
    top = sol.post.a_tilde_star

    if sol.case is CaseTag.CASE_II:
        assert _ode_residual(params, (sol.a_star, top)) < 1e-8
        assert _ode_residual(params, (top, 100 * top)) < 1e-8
    else:
        assert _ode_residual(params, (sol.a_star, 100 * sol.a_star)) < 1e-8


@pytest.mark.parametrize("fixture", ["case_one", "case_two"])
def test_derivatives_match_finite_differences(request, fixture) -> None:
    params = request.getfixturevalue(fixture)
    sol = solve_pre_exit(params)
    edges = (*sol.breakpoints, 5.0 * sol.breakpoints[-1])
    points = [math.sqrt(lo * hi) for lo, hi in zip(edges, edges[1:])] + [10.0]

    for x in points:
        h = 1e-4 * x
        below, at, above = (float(value_pre(sol, params, y)) for y in (x - h, x, x + h))
        assert value_pre(sol, params, x, 1) == pytest.approx((above - below) / (2 * h), rel=1e-6)
        assert value_pre(sol, params, x, 2) == pytest.approx((above - 2 * at + below) / h**2, rel=1e-4)


def test_ode_residuals_on_random_parameters(random_param_sets) -> None:
    for params in random_param_sets:
        sol = solve_pre_exit(params)
        lower = sol.a_star
        for upper in (*sol.breakpoints[1:], 100 * sol.breakpoints[-1]):
            assert _ode_residual(params, (lower, upper)) < 1e-8
            lower = upper


def test_post_entry_thresholds_ignore_the_cancellation_hazard(case_one, case_two) -> None:
    for params in (case_one, case_two):
        base = solve_pre_exit(params)
        moved = solve_pre_exit(params.with_values(lambda1=0.9))
        assert moved.a_star == base.a_star
        assert moved.post.a_tilde_star == base.post.a_tilde_star


def _a_star_sweep(alpha: float, beta: float, grid) -> tuple[np.ndarray, list[CaseTag]]:
    solutions = [
        solve_pre_exit(ModelParams.from_flat({**COMMON, "alpha": alpha, "beta": beta, "lambda2": lam})) for lam in grid
    ]
    return np.array([s.a_star for s in solutions]), [s.case for s in solutions]


@pytest.mark.parametrize(("alpha", "beta"), [(0.2, 14.0), (0.2, 7.0)])
def test_low_post_competition_profit_raises_threshold_with_hazard(alpha, beta) -> None:
    a_star, cases = _a_star_sweep(alpha, beta, np.geomspace(0.01, 10.0, 30))

    assert set(cases) == {CaseTag.CASE_II}
    assert np.all(np.diff(a_star) > 0)


def test_high_post_competition_profit_lowers_threshold_with_hazard() -> None:
    a_star, cases = _a_star_sweep(0.8, 7.0, np.geomspace(0.1, 10.0, 30))

    assert set(cases) == {CaseTag.CASE_I}
    assert np.all(np.diff(a_star) < 0)


def test_high_post_competition_profit_has_small_hazard_rise() -> None:
    a_star, cases = _a_star_sweep(0.8, 7.0, [0.01, 0.02, 0.1])

    assert set(cases) == {CaseTag.CASE_I}
    assert a_star[0] == pytest.approx(2.6756, abs=5e-4)
    assert a_star[1] == pytest.approx(2.6957, abs=5e-4)
    assert a_star[2] == pytest.approx(2.6198, abs=5e-4)


def test_intermediate_profit_gives_hump_and_case_switch() -> None:
    a_star, cases = _a_star_sweep(0.45, 7.0, np.geomspace(0.01, 10.0, 30))

    assert cases[0] is CaseTag.CASE_II
    assert cases[-1] is CaseTag.CASE_I
    peak = int(np.argmax(a_star))
    assert 0 < peak < len(a_star) - 1


@pytest.mark.parametrize(("alpha", "beta"), [(0.2, 14.0), (0.2, 7.0), (0.45, 7.0), (0.8, 7.0)])
def test_threshold_approaches_post_competition_level(alpha, beta) -> None:
    grid = [1.0, 2.0, 5.0, 10.0, 50.0]
    a_star, _ = _a_star_sweep(alpha, beta, grid)
    a_tilde = solve_post_exit(ModelParams.from_flat({**COMMON, "alpha": alpha, "beta": beta})).a_tilde_star

    assert np.all(np.diff(np.abs(a_star - a_tilde)) < 0)


def test_invalid_parameters_are_rejected(make_params) -> None:
    with pytest.raises(ParameterError):
        solve_pre_exit(make_params(sigma=-0.2))
