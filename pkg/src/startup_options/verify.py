"""Independent checks of the closed-form solutions.

* killing identity: the post-entry value simulated with an explicit competitor clock
  versus the same expectation with the clock folded into the discount rate;
* perturbation optimality: moving a threshold must not raise the simulated value;
* ODE residuals of every smooth branch on a dense log grid;
* Monte Carlo agreement of the three value functions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from numpy.typing import NDArray

from startup_options.entry import EntrySolution, solve_entry, value_entry
from startup_options.exit_post import value_post
from startup_options.exit_pre import CaseTag, solve_pre_exit, value_pre
from startup_options.params import MarketParams, ModelParams, cost_incubation, ensure_valid, profit_pre
from startup_options.simulation import (
    ClockMode,
    McConfig,
    McEstimate,
    Stage,
    ThresholdStrategy,
    simulate_npv,
    simulate_samples,
    summarize,
    truncation_bound,
)

LOGGER = logging.getLogger(__name__)

ODE_TOL = 1e-8
ODE_POINTS = 1000
MC_SIGMAS = 3.0
KILLING_Z_LIMIT = 4.0
DEFAULT_DELTAS = (-0.10, -0.05, 0.05, 0.10)


@dataclass(frozen=True)
class KillingReport:
    two_clock: McEstimate
    killed: McEstimate
    std_err_diff: float
    z: float


def _paired(a: NDArray[np.float64], b: NDArray[np.float64]) -> tuple[float, float, float]:
    """Difference of means, its paired standard error and the z-score."""
    diff, se = summarize(a - b)
    if se == 0:
        return diff, 0.0, 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return diff, se, diff / se


def _estimate(params: ModelParams, samples: NDArray[np.float64], x0: float, horizon: float, cfg: McConfig) -> McEstimate:
    mean, se = summarize(samples)
    return McEstimate(mean, se, cfg.n_paths, truncation_bound(params, x0, horizon), horizon, cfg.dt)


def killing_identity_check(params: ModelParams, strategy: ThresholdStrategy, x0: float, cfg: McConfig) -> KillingReport:
    """Post-entry value with the competitor clock simulated versus killed at rate lambda2.

    The two-clock form runs f until min(abandonment, arrival) and then collects the
    closed-form value of abandoning post-competition at `strategy.abandon_post_at`.
    Both forms use the same draws, so for lambda2 = 0 they coincide path by path.
    """
    clocked, horizon = simulate_samples(params, strategy, Stage.POST_ENTRY, x0, cfg, ClockMode.TERMINAL)
    killed, _ = simulate_samples(params, strategy, Stage.POST_ENTRY, x0, cfg, ClockMode.KILLED)
    _, se, z = _paired(clocked, killed)
    report = KillingReport(
        two_clock=_estimate(params, clocked, x0, horizon, cfg),
        killed=_estimate(params, killed, x0, horizon, cfg),
        std_err_diff=se,
        z=z,
    )
    LOGGER.info(
        "Killing identity x0=%.6g two_clock=%.12g killed=%.12g z=%.3f",
        x0,
        report.two_clock.mean,
        report.killed.mean,
        z,
    )
    return report


class ThresholdSelector(str, Enum):
    CANCEL_AT = "cancel_at"
    ENTER_AT = "enter_at"
    ABANDON_PRE_AT = "abandon_pre_at"
    ABANDON_POST_AT = "abandon_post_at"

    @property
    def stage(self) -> Stage:
        """Earliest stage whose value depends on the selected threshold."""
        if self is ThresholdSelector.ABANDON_POST_AT:
            return Stage.POST_COMPETITION
        if self is ThresholdSelector.ABANDON_PRE_AT:
            return Stage.POST_ENTRY
        return Stage.PRE_ENTRY


@dataclass(frozen=True)
class PerturbationRow:
    delta: float
    threshold: float
    estimate: McEstimate
    diff: float
    std_err_diff: float
    improved: bool
    lower: bool


@dataclass(frozen=True)
class PerturbationReport:
    which: ThresholdSelector
    x0: float
    base: McEstimate
    rows: tuple[PerturbationRow, ...]

    @property
    def flagged(self) -> bool:
        return any(row.improved for row in self.rows)


def perturbation_optimality(
    params: ModelParams,
    base: ThresholdStrategy,
    which: ThresholdSelector,
    deltas: Iterable[float],
    x0: float,
    cfg: McConfig,
) -> PerturbationReport:
    """Simulate `base` with one threshold scaled by (1 + delta) for each delta.

    A row is flagged `improved` when the perturbed value beats the base by more than
    three paired standard errors, and `lower` when the base wins by that margin.
    """
    which = ThresholdSelector(which)
    stage = which.stage
    base_samples, horizon = simulate_samples(params, base, stage, x0, cfg)
    rows = []
    for delta in deltas:
        level = getattr(base, which.value) * (1.0 + delta)
        strategy = base.replace(**{which.value: level})
        samples, _ = simulate_samples(params, strategy, stage, x0, cfg)
        diff, se, _ = _paired(samples, base_samples)
        row = PerturbationRow(
            delta=float(delta),
            threshold=level,
            estimate=_estimate(params, samples, x0, horizon, cfg),
            diff=diff,
            std_err_diff=se,
            improved=diff > MC_SIGMAS * se,
            lower=-diff > MC_SIGMAS * se,
        )
        LOGGER.debug("Perturbation %s delta=%+.3f diff=%.6g se=%.3g", which.value, delta, diff, se)
        rows.append(row)
    return PerturbationReport(which, x0, _estimate(params, base_samples, x0, horizon, cfg), tuple(rows))


class Branch(Protocol):
    breakpoints: tuple[float, ...]

    def __call__(self, x: NDArray[np.float64], derivative: int = 0) -> NDArray[np.float64] | float: ...


@dataclass(frozen=True)
class FunctionBranch:
    """A value function with analytic derivatives, as `fn(x, derivative)`, and its kinks."""

    fn: Callable[..., NDArray[np.float64] | float]
    breakpoints: tuple[float, ...] = ()

    def __call__(self, x: NDArray[np.float64], derivative: int = 0) -> NDArray[np.float64] | float:
        return self.fn(x, derivative)


def ode_residual_scan(
    value_fn: Branch,
    region: tuple[float, float],
    killed_rate: float,
    inflow: Callable[[NDArray[np.float64]], NDArray[np.float64] | float],
    market: MarketParams,
    points: int = ODE_POINTS,
) -> float:
    """Largest scaled residual of -(rho + lambda) w + mu x w' + (sigma^2 x^2/2) w'' + inflow.

    The residual at each of `points` log-spaced interior points is divided by the largest
    term magnitude (at least 1). `region` must not straddle a breakpoint of `value_fn`.
    """
    lo, hi = region
    if not 0 < lo < hi:
        raise ValueError(f"invalid region {region}")
    inside = [bp for bp in value_fn.breakpoints if lo < bp < hi]
    if inside:
        raise ValueError(f"region {region} contains branch boundaries {inside}")
    x = np.geomspace(lo, hi, points + 2)[1:-1]
    terms = np.vstack(
        [
            -(market.rho + killed_rate) * np.asarray(value_fn(x, 0)),
            market.mu * x * np.asarray(value_fn(x, 1)),
            0.5 * market.sigma**2 * x**2 * np.asarray(value_fn(x, 2)),
            np.broadcast_to(np.asarray(inflow(x), dtype=float), x.shape),
        ]
    )
    scale = np.maximum(1.0, np.max(np.abs(terms), axis=0))
    return float(np.max(np.abs(terms.sum(axis=0)) / scale))


@dataclass(frozen=True)
class OdeBranchCase:
    name: str
    branch: FunctionBranch
    region: tuple[float, float]
    killed_rate: float
    inflow: Callable[[NDArray[np.float64]], NDArray[np.float64] | float]


def ode_branches(params: ModelParams, entry: EntrySolution, span: float = 100.0) -> list[OdeBranchCase]:
    """Every smooth branch of the post-competition, post-entry and entry value functions."""
    pre = entry.pre
    post = pre.post
    lam1, lam2 = params.hazards.lambda1, params.hazards.lambda2
    post_value = FunctionBranch(partial(value_post, post, params), post.breakpoints)
    pre_value = FunctionBranch(partial(value_pre, pre, params), pre.breakpoints)
    entry_value = FunctionBranch(partial(value_entry, entry, params), entry.breakpoints)

    def pre_inflow(x):
        return profit_pre(x, params.profit) + lam2 * np.asarray(value_post(post, params, x))

    def entry_inflow(x):
        return -cost_incubation(x, params.cost)

    def post_inflow(x):
        return params.profit.alpha * x - params.profit.beta

    cases = []
    a_tilde = post.a_tilde_star
    if math.isfinite(a_tilde):
        cases.append(OdeBranchCase("post_competition", post_value, (a_tilde, span * a_tilde), 0.0, post_inflow))
    if pre.case is CaseTag.CASE_II:
        top = a_tilde if math.isfinite(a_tilde) else span * pre.a_star
        cases.append(OdeBranchCase("post_entry_middle", pre_value, (pre.a_star, top), lam2, pre_inflow))
        if math.isfinite(a_tilde):
            cases.append(OdeBranchCase("post_entry_upper", pre_value, (a_tilde, span * a_tilde), lam2, pre_inflow))
    else:
        cases.append(OdeBranchCase("post_entry_upper", pre_value, (pre.a_star, span * pre.a_star), lam2, pre_inflow))
    cases.append(OdeBranchCase("entry", entry_value, (entry.c_star, entry.e_star), lam1, entry_inflow))
    return cases


def interface_gaps(params: ModelParams, entry: EntrySolution, rel_step: float = 1e-11) -> dict[str, float]:
    """Jumps of value and slope across every free boundary, scaled by max(1, |value|)."""
    pre = entry.pre
    post = pre.post
    checks: list[tuple[str, Callable[..., NDArray[np.float64] | float], float, Callable[..., float] | None]] = []
    if math.isfinite(post.a_tilde_star):
        checks.append(("a_tilde_star", partial(value_post, post, params), post.a_tilde_star, None))
    checks.append(("a_star", partial(value_pre, pre, params), pre.a_star, None))
    if pre.case is CaseTag.CASE_II and math.isfinite(post.a_tilde_star):
        checks.append(("a_tilde_star_branch", partial(value_pre, pre, params), post.a_tilde_star, None))
    checks.append(("c_star", partial(value_entry, entry, params), entry.c_star, None))
    checks.append(("e_star", partial(value_entry, entry, params), entry.e_star, partial(value_pre, pre, params)))

    gaps: dict[str, float] = {}
    for name, fn, point, outside in checks:
        below, above = point * (1.0 - rel_step), point * (1.0 + rel_step)
        right = outside or fn
        value_gap = abs(float(fn(below)) - float(right(above)))
        slope_gap = abs(float(fn(below, 1)) - float(right(above, 1)))
        scale = max(1.0, abs(float(right(above))), abs(float(right(above, 1))))
        # the one-sided values differ by O(rel_step * point * slope) from the kink itself
        allowance = 4.0 * rel_step * point * max(1.0, abs(float(right(above, 1))), abs(float(fn(below, 1))))
        gaps[name] = max(0.0, value_gap - allowance) / scale + slope_gap / scale
    return gaps


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    metric: float
    limit: float
    detail: str = ""


@dataclass(frozen=True)
class VerificationReport:
    checks: tuple[CheckResult, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def _test_prices(lower: float, upper: float, count: int = 3) -> list[float]:
    return [float(v) for v in np.geomspace(lower, upper, count + 2)[1:-1]]


def run_verification(
    params: ModelParams,
    cfg: McConfig,
    *,
    overrides: dict[str, float] | None = None,
    deltas: Sequence[float] = DEFAULT_DELTAS,
) -> VerificationReport:
    """Solve the model and run every check; `overrides` replaces analytic thresholds by name."""
    ensure_valid(params, log_warnings=True)
    pre = solve_pre_exit(params)
    entry = solve_entry(params, pre)
    strategy = ThresholdStrategy.from_solution(entry)
    if overrides:
        strategy = strategy.replace(**overrides)
        LOGGER.warning("Verifying with overridden thresholds %s", overrides)
    checks: list[CheckResult] = []

    for case in ode_branches(params, entry):
        residual = ode_residual_scan(case.branch, case.region, case.killed_rate, case.inflow, params.market)
        checks.append(CheckResult(f"ode:{case.name}", residual < ODE_TOL, residual, ODE_TOL))
    for name, gap in interface_gaps(params, entry).items():
        checks.append(CheckResult(f"pasting:{name}", gap < ODE_TOL, gap, ODE_TOL))

    a_tilde = pre.post.a_tilde_star
    stages: list[tuple[Stage, Callable[[float], float], list[float]]] = [
        (Stage.POST_ENTRY, lambda x: float(value_pre(pre, params, x)), _test_prices(pre.a_star, 3.0 * pre.a_star)),
        (Stage.PRE_ENTRY, lambda x: float(value_entry(entry, params, x)), _test_prices(entry.c_star, entry.e_star)),
    ]
    if math.isfinite(a_tilde):
        stages.insert(0, (Stage.POST_COMPETITION, lambda x: float(value_post(pre.post, params, x)), _test_prices(a_tilde, 3.0 * a_tilde)))
    for stage, analytic, prices in stages:
        for x0 in prices:
            estimate = simulate_npv(params, strategy, stage, x0, cfg)
            expected = analytic(x0)
            margin = MC_SIGMAS * estimate.std_err + estimate.truncation_bound
            checks.append(
                CheckResult(
                    f"mc:{stage.value}@{x0:.6g}",
                    abs(estimate.mean - expected) <= margin,
                    abs(estimate.mean - expected),
                    margin,
                    f"analytic={expected:.12g} mc={estimate.mean:.12g} se={estimate.std_err:.6g}",
                )
            )

    killing_x0 = 2.0 * max(pre.a_star, a_tilde if math.isfinite(a_tilde) else pre.a_star)
    killing = killing_identity_check(params, strategy, killing_x0, cfg)
    checks.append(
        CheckResult(
            "killing_identity",
            abs(killing.z) < KILLING_Z_LIMIT,
            abs(killing.z),
            KILLING_Z_LIMIT,
            f"two_clock={killing.two_clock.mean:.12g} killed={killing.killed.mean:.12g}",
        )
    )

    starts = {
        ThresholdSelector.ABANDON_POST_AT: 1.2 * a_tilde,
        ThresholdSelector.ABANDON_PRE_AT: 1.2 * strategy.abandon_pre_at,
        ThresholdSelector.CANCEL_AT: math.sqrt(strategy.cancel_at * strategy.enter_at),
        ThresholdSelector.ENTER_AT: math.sqrt(strategy.cancel_at * strategy.enter_at),
    }
    for which, x0 in starts.items():
        if not math.isfinite(x0):
            continue
        report = perturbation_optimality(params, strategy, which, deltas, x0, cfg)
        worst = max((row.diff / row.std_err_diff if row.std_err_diff else 0.0) for row in report.rows)
        checks.append(
            CheckResult(
                f"perturbation:{which.value}",
                not report.flagged,
                worst,
                MC_SIGMAS,
                " ".join(f"{row.delta:+g}:{row.diff:.6g}" for row in report.rows),
            )
        )

    result = VerificationReport(tuple(checks))
    failed = [check.name for check in result.checks if not check.passed]
    if failed:
        LOGGER.warning("Verification failed checks=%s", ",".join(failed))
    else:
        LOGGER.info("Verification passed checks=%d", len(result.checks))
    return result
