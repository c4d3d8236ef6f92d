from __future__ import annotations

from functools import partial

import numpy as np
import pytest

from startup_options.entry import solve_entry
from startup_options.errors import SolverError
from startup_options.exit_post import solve_post_exit, value_post
from startup_options.exit_pre import solve_pre_exit
from startup_options.simulation import McConfig, ThresholdStrategy
from startup_options.verify import (
    FunctionBranch,
    ThresholdSelector,
    interface_gaps,
    killing_identity_check,
    ode_branches,
    ode_residual_scan,
    perturbation_optimality,
    run_verification,
)


def _entry(params):
    return solve_entry(params, solve_pre_exit(params))


def _quick(**overrides) -> McConfig:
    return McConfig(**{"n_paths": 1000, "dt": 0.02, "horizon": 20.0, "seed": 21, "block_size": 250, **overrides})


def test_zero_function_has_zero_residual(case_one) -> None:
    branch = FunctionBranch(lambda x, derivative=0: np.zeros_like(x))

    assert ode_residual_scan(branch, (1.0, 10.0), 0.3, lambda x: 0.0, case_one.market) == 0.0


def test_region_across_a_breakpoint_is_rejected(case_one) -> None:
    sol = solve_post_exit(case_one)
    branch = FunctionBranch(partial(value_post, sol, case_one), sol.breakpoints)

    with pytest.raises(ValueError, match="branch boundaries"):
        ode_residual_scan(branch, (1.0, 10.0), 0.0, lambda x: 0.6 * x - 7.0, case_one.market)
    with pytest.raises(ValueError):
        ode_residual_scan(branch, (10.0, 5.0), 0.0, lambda x: 0.6 * x - 7.0, case_one.market)


def test_corrupted_solution_is_detected(case_one) -> None:
    sol = solve_post_exit(case_one)

    def corrupted(x, derivative=0):
        bump = (0.1 * x, 0.1 + 0.0 * x, 0.0 * x)[derivative]
        return value_post(sol, case_one, x, derivative) + bump

    residual = ode_residual_scan(
        FunctionBranch(corrupted, sol.breakpoints),
        (sol.a_tilde_star, 100 * sol.a_tilde_star),
        0.0,
        lambda x: 0.6 * x - 7.0,
        case_one.market,
    )
    assert residual > 1e-4


def test_branch_layout_follows_the_case(case_one, case_two) -> None:
    left = [case.name for case in ode_branches(case_one, _entry(case_one))]
    right = [case.name for case in ode_branches(case_two, _entry(case_two))]

    assert left == ["post_competition", "post_entry_upper", "entry"]
    assert right == ["post_competition", "post_entry_middle", "post_entry_upper", "entry"]


@pytest.mark.parametrize("fixture", ["case_one", "case_two"])
def test_every_branch_solves_its_ode(request, fixture) -> None:
    params = request.getfixturevalue(fixture)
    entry = _entry(params)

    for case in ode_branches(params, entry):
        residual = ode_residual_scan(case.branch, case.region, case.killed_rate, case.inflow, params.market)
        assert residual < 1e-8, case.name
    gaps = interface_gaps(params, entry)
    assert set(gaps) >= {"a_tilde_star", "a_star", "c_star", "e_star"}
    assert max(gaps.values()) < 1e-8


def test_random_parameter_sets_solve_their_odes(random_param_sets) -> None:
    checked = 0
    for params in random_param_sets:
        try:
            entry = _entry(params)
        except SolverError:
            continue
        checked += 1
        for case in ode_branches(params, entry):
            assert ode_residual_scan(case.branch, case.region, case.killed_rate, case.inflow, params.market) < 1e-8
        assert max(interface_gaps(params, entry).values()) < 1e-8
    assert checked >= 10


def test_killing_identity_is_exact_without_competitor(tame) -> None:
    params = tame.with_values(lambda2=0.0)
    strategy = ThresholdStrategy.from_solution(_entry(tame))

    report = killing_identity_check(params, strategy, 2.0 * strategy.abandon_pre_at, _quick())
    assert report.two_clock.mean == report.killed.mean
    assert report.z == 0.0
    assert report.std_err_diff == 0.0


def test_killing_identity_is_deterministic(tame) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame))
    x0 = 2.0 * strategy.abandon_pre_at

    assert killing_identity_check(tame, strategy, x0, _quick()) == killing_identity_check(tame, strategy, x0, _quick())


@pytest.mark.slow
def test_killing_identity_holds_statistically(tame) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame))
    x0 = 2.0 * max(strategy.abandon_pre_at, strategy.abandon_post_at)

    report = killing_identity_check(tame, strategy, x0, McConfig(n_paths=10_000, dt=0.01, seed=2))
    assert abs(report.z) < 4


def test_zero_perturbation_changes_nothing(tame) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame))

    report = perturbation_optimality(tame, strategy, "abandon_post_at", [0.0], 1.5 * strategy.abandon_post_at, _quick())
    assert report.rows[0].diff == 0.0
    assert not report.flagged
    assert report.which is ThresholdSelector.ABANDON_POST_AT


def test_far_threshold_is_reported_lower(tame) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame))

    report = perturbation_optimality(tame, strategy, "abandon_post_at", [2.0], 1.5 * strategy.abandon_post_at, _quick())
    row = report.rows[0]
    assert row.threshold == pytest.approx(3.0 * strategy.abandon_post_at)
    assert row.lower
    assert not report.flagged


@pytest.mark.slow
@pytest.mark.parametrize("which", list(ThresholdSelector))
def test_analytic_thresholds_are_not_improved(tame, which) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame))
    x0 = {
        ThresholdSelector.ABANDON_POST_AT: 1.2 * strategy.abandon_post_at,
        ThresholdSelector.ABANDON_PRE_AT: 1.2 * strategy.abandon_pre_at,
    }.get(which, float(np.sqrt(strategy.cancel_at * strategy.enter_at)))

    report = perturbation_optimality(tame, strategy, which, [-0.1, -0.05, 0.05, 0.1], x0, McConfig(n_paths=10_000, dt=0.01, seed=6))
    assert not report.flagged


def test_threshold_stages() -> None:
    assert ThresholdSelector("abandon_post_at").stage.value == "PostCompetition"
    assert ThresholdSelector("abandon_pre_at").stage.value == "PostEntry"
    assert ThresholdSelector("enter_at").stage.value == "PreEntry"
    assert ThresholdSelector("cancel_at").stage.value == "PreEntry"


def test_verification_report_lists_every_check(tame) -> None:
    report = run_verification(tame, _quick(n_paths=400, block_size=200), deltas=[-0.05, 0.05])
    names = [check.name for check in report.checks]

    assert {"ode:entry", "pasting:c_star", "pasting:e_star", "killing_identity"} <= set(names)
    assert sum(name.startswith("mc:") for name in names) == 9
    assert {name for name in names if name.startswith("perturbation:")} == {
        f"perturbation:{which.value}" for which in ThresholdSelector
    }
    assert all(check.passed for check in report.checks if not check.name.startswith(("mc:", "perturbation:", "killing")))


@pytest.mark.slow
def test_wrong_threshold_fails_verification(tame) -> None:
    a_tilde = solve_post_exit(tame).a_tilde_star

    report = run_verification(tame, McConfig(n_paths=2000, dt=0.05, seed=1), overrides={"abandon_post_at": 3.0 * a_tilde})
    failed = [check.name for check in report.checks if not check.passed]
    assert not report.passed
    assert any(name.startswith("mc:PostCompetition") for name in failed)


@pytest.mark.slow
def test_killing_identity_holds_in_case_two(tame_case_two) -> None:
    entry = _entry(tame_case_two)
    strategy = ThresholdStrategy.from_solution(entry)
    x0 = float(np.sqrt(entry.pre.a_star * entry.pre.post.a_tilde_star))

    report = killing_identity_check(tame_case_two, strategy, x0, McConfig(n_paths=10_000, dt=0.01, seed=3))
    assert abs(report.z) < 4


@pytest.mark.slow
@pytest.mark.parametrize("which", [ThresholdSelector.ABANDON_PRE_AT, ThresholdSelector.ENTER_AT])
def test_case_two_thresholds_are_not_improved(tame_case_two, which) -> None:
    strategy = ThresholdStrategy.from_solution(_entry(tame_case_two))
    x0 = (
        1.2 * strategy.abandon_pre_at
        if which is ThresholdSelector.ABANDON_PRE_AT
        else float(np.sqrt(strategy.cancel_at * strategy.enter_at))
    )

    report = perturbation_optimality(
        tame_case_two, strategy, which, [-0.1, -0.05, 0.05, 0.1], x0, McConfig(n_paths=10_000, dt=0.01, seed=7)
    )
    assert not report.flagged
