"""Incubation-period problem: cancellation threshold c*, entry threshold e*, value psi.

On (c*, e*) the value is J(x) = D1 x^q1 + D2 x^q2 - a x/(rho + lambda1 - mu) - b/(rho + lambda1).
For fixed (c, e) value matching at both ends is linear in (D1, D2); the two smooth-pasting
conditions are then solved for (c, e) by damped Newton in log coordinates.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from numpy.typing import ArrayLike, NDArray

from startup_options.errors import SolverError
from startup_options.exit_pre import PreExitSolution, value_pre
from startup_options.numerics import as_price_array, damped_newton, power, scalar_or_array
from startup_options.params import ModelParams, ensure_valid, model_roots

LOGGER = logging.getLogger(__name__)

NEWTON_XTOL = 1e-12
NEWTON_MAXITER = 200
RESIDUAL_TOL = 1e-9
GRID_CANCEL = (0.05, 0.1, 0.2, 0.35, 0.5, 0.75, 0.95)
GRID_ENTER = (1.1, 1.5, 2.0, 3.0, 5.0, 10.0, 20.0)
FEASIBILITY_POINTS = 200
DISTINCT_RTOL = 1e-6
# largest |log price| a Newton trial point may reach before it counts as inadmissible
MAX_LOG_PRICE = 700.0


@dataclass(frozen=True)
class EntrySolution:
    c_star: float
    e_star: float
    q1: float
    q2: float
    pre: PreExitSolution
    # anchored coefficients: D1 c*^q1 and D2 e*^q2
    d1_scaled: float
    d2_scaled: float
    residuals: tuple[float, float, float, float]
    warnings: tuple[str, ...] = field(default=())

    @property
    def d1(self) -> float:
        return self.d1_scaled / power(self.c_star, self.q1)

    @property
    def d2(self) -> float:
        return self.d2_scaled / power(self.e_star, self.q2)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return (self.c_star, self.e_star)


@dataclass(frozen=True)
class _Candidate:
    c: float
    e: float
    d1_scaled: float
    d2_scaled: float
    residuals: tuple[float, float, float, float]


def _cost_part(params: ModelParams, x: NDArray[np.float64] | float, derivative: int = 0):
    """Particular solution of the incubation ODE: minus the discounted cost stream."""
    m, c, lam1 = params.market, params.cost, params.hazards.lambda1
    slope = c.cost_slope / (m.rho + lam1 - m.mu)
    if derivative == 0:
        return -slope * x - c.cost_intercept / (m.rho + lam1)
    if derivative == 1:
        return -slope + 0.0 * x
    return 0.0 * x


class _EntrySystem:
    """Value-matching / smooth-pasting system for a fixed pre-exit solution."""

    def __init__(self, params: ModelParams, pre: PreExitSolution) -> None:
        self.params = params
        self.pre = pre
        roots = model_roots(params)
        self.q1, self.q2 = roots.q1, roots.q2

    def coefficients(self, c: float, e: float) -> tuple[float, float, float, float]:
        """Anchored (D1 c^q1, D2 e^q2) from J(c) = 0 and J(e) = V(e); also V(e), V'(e)."""
        v_e = float(value_pre(self.pre, self.params, e))
        dv_e = float(value_pre(self.pre, self.params, e, 1))
        r1 = power(e / c, self.q1)
        r2 = power(c / e, self.q2)
        rhs1 = -_cost_part(self.params, c)
        rhs2 = v_e - _cost_part(self.params, e)
        det = 1.0 - r1 * r2
        d1_scaled = (rhs1 - r2 * rhs2) / det
        d2_scaled = (rhs2 - r1 * rhs1) / det
        return d1_scaled, d2_scaled, v_e, dv_e

    def residuals(self, c: float, e: float) -> tuple[tuple[float, float, float, float], float, float]:
        """Scaled ce1..ce4 residuals at (c, e), with the anchored coefficients."""
        d1_scaled, d2_scaled, v_e, dv_e = self.coefficients(c, e)
        r1 = power(e / c, self.q1)
        r2 = power(c / e, self.q2)
        value_scale = max(1.0, abs(v_e))
        slope_scale = max(1.0, abs(dv_e))
        j_c = d1_scaled + d2_scaled * r2 + _cost_part(self.params, c)
        j_e = d1_scaled * r1 + d2_scaled + _cost_part(self.params, e)
        dj_c = (self.q1 * d1_scaled + self.q2 * d2_scaled * r2) / c + _cost_part(self.params, c, 1)
        dj_e = (self.q1 * d1_scaled * r1 + self.q2 * d2_scaled) / e + _cost_part(self.params, e, 1)
        return (
            (
                j_c / value_scale,
                dj_c / slope_scale,
                (j_e - v_e) / value_scale,
                (dj_e - dv_e) / slope_scale,
            ),
            d1_scaled,
            d2_scaled,
        )

    def pasting(self, y: NDArray[np.float64]) -> NDArray[np.float64]:
        failed = np.array([np.nan, np.nan])
        if not np.all(np.isfinite(y)) or float(np.max(np.abs(y))) > MAX_LOG_PRICE:
            return failed
        c, e = math.exp(y[0]), math.exp(y[1])
        if not c < e or e <= self.pre.a_star:
            return failed
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            res, _, _ = self.residuals(c, e)
        out = np.array([res[1], res[3]])
        return out if np.all(np.isfinite(out)) else failed

    def continuation(self, cand: _Candidate, x: NDArray[np.float64], derivative: int = 0) -> NDArray[np.float64]:
        q1, q2 = self.q1, self.q2
        first = cand.d1_scaled * np.asarray(power(x / cand.c, q1))
        second = cand.d2_scaled * np.asarray(power(x / cand.e, q2))
        if derivative == 1:
            first, second = first * q1 / x, second * q2 / x
        elif derivative == 2:
            first, second = first * q1 * (q1 - 1.0) / x**2, second * q2 * (q2 - 1.0) / x**2
        return first + second + _cost_part(self.params, x, derivative)

    def attempt(self, c0: float, e0: float) -> _Candidate | None:
        result = damped_newton(
            self.pasting, np.log([c0, e0]), xtol=NEWTON_XTOL, maxiter=NEWTON_MAXITER
        )
        if not result.success:
            LOGGER.debug("Entry Newton failed c0=%.6g e0=%.6g message=%s", c0, e0, result.message)
            return None
        c, e = (float(v) for v in np.exp(result.x))
        if not 0 < c < e:
            LOGGER.debug("Entry root rejected for ordering c=%.6g e=%.6g", c, e)
            return None
        res, d1_scaled, d2_scaled = self.residuals(c, e)
        if max(abs(r) for r in res) >= RESIDUAL_TOL:
            LOGGER.debug("Entry root rejected residuals=%s", res)
            return None
        cand = _Candidate(c, e, d1_scaled, d2_scaled, res)
        if not self.feasible(cand):
            LOGGER.debug("Entry root rejected as infeasible c=%.6g e=%.6g", c, e)
            return None
        return cand

    def feasible(self, cand: _Candidate) -> bool:
        """J >= 0 and J >= V on a grid inside (c, e)."""
        grid = np.geomspace(cand.c, cand.e, FEASIBILITY_POINTS + 2)[1:-1]
        j = self.continuation(cand, grid)
        v = np.asarray(value_pre(self.pre, self.params, grid))
        tol = 1e-8 * max(1.0, abs(float(value_pre(self.pre, self.params, cand.e))))
        return bool(np.all(j >= -tol) and np.all(j >= v - tol))


def _is_new(cand: _Candidate, found: list[_Candidate]) -> bool:
    return all(
        abs(cand.c - other.c) > DISTINCT_RTOL * other.c or abs(cand.e - other.e) > DISTINCT_RTOL * other.e
        for other in found
    )


def solve_entry(params: ModelParams, pre_exit: PreExitSolution, *, exhaustive: bool = False) -> EntrySolution:
    """Solve the two-sided entry problem.

    The guess (0.5 a*, 2 a*) is tried first; if it fails (or `exhaustive` is set) a fixed
    grid of starting points spanning (0.05 a*, a*) x (a*, 20 a*) is scanned and every
    distinct valid root is kept. Several roots are resolved by the larger psi at a common
    interior price, with a warning.
    """
    ensure_valid(params)
    system = _EntrySystem(params, pre_exit)
    a_star = pre_exit.a_star

    found: list[_Candidate] = []
    primary = system.attempt(0.5 * a_star, 2.0 * a_star)
    if primary is not None:
        found.append(primary)
    if primary is None or exhaustive:
        for c_mult, e_mult in product(GRID_CANCEL, GRID_ENTER):
            cand = system.attempt(c_mult * a_star, e_mult * a_star)
            if cand is not None and _is_new(cand, found):
                found.append(cand)

    if not found:
        raise SolverError(
            "no admissible (c*, e*) found from any starting point",
            code="no-interior-solution",
            details={"a_star": a_star},
        )

    warnings: list[str] = []
    best = found[0]
    if len(found) > 1:
        midpoint = np.array([0.5 * (found[0].c + found[0].e)])
        best = max(found, key=lambda cand: float(_psi(system, cand, midpoint)[0]))
        message = f"{len(found)} distinct entry solutions found; kept c*={best.c:.12g} e*={best.e:.12g}"
        LOGGER.warning(message)
        warnings.append(message)
    if not best.c < best.e:
        raise SolverError(f"threshold ordering violated c*={best.c} e*={best.e}", code="threshold-ordering")

    solution = EntrySolution(
        c_star=best.c,
        e_star=best.e,
        q1=system.q1,
        q2=system.q2,
        pre=pre_exit,
        d1_scaled=best.d1_scaled,
        d2_scaled=best.d2_scaled,
        residuals=best.residuals,
        warnings=tuple(warnings),
    )
    LOGGER.info("Solved entry c_star=%.12g e_star=%.12g", solution.c_star, solution.e_star)
    return solution


def _psi(system: _EntrySystem, cand: _Candidate, x: NDArray[np.float64], derivative: int = 0) -> NDArray[np.float64]:
    stop = np.asarray(value_pre(system.pre, system.params, x, derivative))
    inside = system.continuation(cand, x, derivative)
    return np.where(x >= cand.e, stop, np.where(x > cand.c, inside, 0.0))


def value_entry(
    sol: EntrySolution, params: ModelParams, x: ArrayLike, derivative: int = 0
) -> NDArray[np.float64] | float:
    """psi(x): V(x) from e* up, J(x) on (c*, e*), 0 at and below c*."""
    if derivative not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    prices = as_price_array(x)
    system = _EntrySystem(params, sol.pre)
    cand = _Candidate(sol.c_star, sol.e_star, sol.d1_scaled, sol.d2_scaled, sol.residuals)
    return scalar_or_array(_psi(system, cand, np.atleast_1d(prices), derivative).reshape(prices.shape))
