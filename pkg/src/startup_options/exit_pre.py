"""Pre-competition abandonment: case classification via alpha0, threshold a*, value function V.

Case I (K >= beta, alpha >= alpha0): a* >= a~* is the root of H on [a~*, inf).
Case II (K < beta, or alpha < alpha0): a* < a~* is the root of M on (0, a~*), and V has
an extra branch on (a*, a~*] where the post-competition value is zero.

Coefficients are stored anchored at the branch endpoints (C x^p = A (x/anchor)^p) so
that evaluation stays finite when |p| is large; the raw C1..C4 are derived properties.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import brentq

from startup_options.errors import SolverError
from startup_options.exit_post import PostExitSolution, solve_post_exit
from startup_options.numerics import as_price_array, power, scalar_or_array
from startup_options.params import ModelParams, ensure_valid, model_roots

LOGGER = logging.getLogger(__name__)

CLASSIFICATION_TOL = 1e-9
ROOT_XTOL = 1e-14
MAX_BRACKET_EXPANSIONS = 200
RESIDUAL_TOL = 1e-9


class CaseTag(str, Enum):
    CASE_I = "CaseI"
    CASE_II = "CaseII"
    BOUNDARY = "Boundary"


def critical_alpha(params: ModelParams) -> float:
    """alpha0 separating case I from case II; exactly 1 when K = beta."""
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    roots = model_roots(params)
    k1, p1 = roots.k1, roots.p1
    weight = (m.rho * p1 * (k1 - 1.0) * (m.rho + lam2 - m.mu)) / (
        k1 * (p1 - 1.0) * (m.rho - m.mu) * (m.rho + lam2)
    )
    return 1.0 / (1.0 - weight * (1.0 - p.cap_k / p.beta))


def critical_alpha_limit(params: ModelParams) -> float:
    """Limit of alpha0 as lambda2 grows without bound."""
    m, p = params.market, params.profit
    k1 = model_roots(params).k1
    return 1.0 / (1.0 + m.rho * (1.0 - k1) / (k1 * (m.rho - m.mu)) * (1.0 - p.cap_k / p.beta))


def classify(params: ModelParams, tol: float = CLASSIFICATION_TOL) -> CaseTag:
    p = params.profit
    if p.cap_k < p.beta:
        return CaseTag.CASE_II
    alpha0 = critical_alpha(params)
    if p.alpha >= alpha0 + tol:
        return CaseTag.CASE_I
    if p.alpha < alpha0 - tol:
        return CaseTag.CASE_II
    return CaseTag.BOUNDARY


def _upper_slope(params: ModelParams) -> float:
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    return (m.rho + p.alpha * lam2 - m.mu) / ((m.rho + lam2 - m.mu) * (m.rho - m.mu))


def _upper_constant(params: ModelParams) -> float:
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    return (p.beta * lam2 + m.rho * p.cap_k) / (m.rho * (m.rho + lam2))


def particular_upper(
    params: ModelParams, post: PostExitSolution, x: ArrayLike, derivative: int = 0
) -> NDArray[np.float64] | float:
    """v1: particular solution of the killed ODE above a~*, where the inflow is f + lambda2 V~."""
    m, p = params.market, params.profit
    prices = np.asarray(x, dtype=float)
    k1, threshold = post.k1, post.a_tilde_star
    # B1 x^k1 written as -(alpha a~* / (k1 (rho - mu))) (x / a~*)^k1
    decay = -p.alpha * threshold / (k1 * (m.rho - m.mu)) * power(prices / threshold, k1)
    slope = _upper_slope(params)
    if derivative == 0:
        out = decay + slope * prices - _upper_constant(params)
    elif derivative == 1:
        out = k1 * decay / prices + slope
    elif derivative == 2:
        out = k1 * (k1 - 1.0) * decay / prices**2
    else:
        raise ValueError("derivative order must be 0, 1 or 2")
    return scalar_or_array(np.asarray(out))


def particular_middle(params: ModelParams, x: ArrayLike, derivative: int = 0) -> NDArray[np.float64] | float:
    """v2: particular solution of the killed ODE where only f flows in."""
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    prices = np.asarray(x, dtype=float)
    if derivative == 0:
        out = prices / (m.rho + lam2 - m.mu) - p.cap_k / (m.rho + lam2)
    elif derivative == 1:
        out = np.full_like(prices, 1.0 / (m.rho + lam2 - m.mu))
    elif derivative == 2:
        out = np.zeros_like(prices)
    else:
        raise ValueError("derivative order must be 0, 1 or 2")
    return scalar_or_array(np.asarray(out))


def _h_terms(params: ModelParams, post: PostExitSolution) -> tuple[float, float, float, float]:
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    if p.alpha == 0:
        raise ValueError("H is undefined for alpha = 0")
    p1 = model_roots(params).p1
    k1 = post.k1
    decay_coeff = p.alpha * (k1 - p1) / (k1 * (m.rho - m.mu)) * post.a_tilde_star
    linear = (m.rho + p.alpha * lam2 - m.mu) / (m.rho + lam2 - m.mu) * (p1 - 1.0) / (m.rho - m.mu)
    constant = p1 * (p.beta * lam2 + m.rho * p.cap_k) / (m.rho * (m.rho + lam2))
    return decay_coeff, linear, constant, k1


def h_fn(x: ArrayLike, params: ModelParams, post: PostExitSolution | None = None, derivative: int = 0):
    """H(x), whose root on [a~*, inf) is a* in case I; H = p1 v1 - x v1'."""
    post = post or solve_post_exit(params)
    decay_coeff, linear, constant, k1 = _h_terms(params, post)
    prices = as_price_array(x)
    scaled = power(prices / post.a_tilde_star, k1)
    if derivative == 0:
        out = decay_coeff * scaled + linear * prices - constant
    elif derivative == 1:
        out = decay_coeff * k1 * scaled / prices + linear
    else:
        raise ValueError("derivative order must be 0 or 1")
    return scalar_or_array(np.asarray(out))


def h_peak(params: ModelParams, post: PostExitSolution | None = None) -> float:
    """Maximiser a0* of the unimodal H."""
    post = post or solve_post_exit(params)
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    p1 = model_roots(params).p1
    k1 = post.k1
    base = (1.0 - p1) * (m.rho + p.alpha * lam2 - m.mu) / (p.alpha * (k1 - p1) * (m.rho + lam2 - m.mu))
    return post.a_tilde_star * base ** (1.0 / (k1 - 1.0))


def _m_coefficient(params: ModelParams) -> float:
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    roots = model_roots(params)
    k1, p1 = roots.k1, roots.p1
    shifted = m.rho + lam2 - m.mu
    numerator = (p1 - k1) * m.rho * shifted + k1 * m.mu * lam2 * (1.0 - p1)
    return numerator * p.beta / ((1.0 - k1) * m.rho * (m.rho + lam2) * shifted)


def m_fn(x: ArrayLike, params: ModelParams, post: PostExitSolution | None = None, derivative: int = 0):
    """M(x), strictly decreasing; its root on (0, a~*) is a* in case II."""
    post = post or solve_post_exit(params)
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    roots = model_roots(params)
    p1, p2 = roots.p1, roots.p2
    prices = as_price_array(x)
    if math.isinf(post.a_tilde_star):
        growth = np.zeros_like(prices)
    else:
        growth = _m_coefficient(params) * power(prices / post.a_tilde_star, p2)
    if derivative == 0:
        out = growth + (p1 - 1.0) / (m.rho + lam2 - m.mu) * prices - p1 * p.cap_k / (m.rho + lam2)
    elif derivative == 1:
        out = p2 * growth / prices + (p1 - 1.0) / (m.rho + lam2 - m.mu)
    else:
        raise ValueError("derivative order must be 0 or 1")
    return scalar_or_array(np.asarray(out))


@dataclass(frozen=True)
class PreExitSolution:
    case: CaseTag
    a_star: float
    alpha0: float
    p1: float
    p2: float
    post: PostExitSolution
    # anchored coefficients: upper = C1 a*^p1 (case I) or C2 a~*^p1 (case II),
    # middle_p1 = C3 a*^p1, middle_p2 = C4 a~*^p2
    upper: float
    middle_p1: float = 0.0
    middle_p2: float = 0.0
    residuals: tuple[float, ...] = ()

    @property
    def breakpoints(self) -> tuple[float, ...]:
        if self.case is CaseTag.CASE_II and math.isfinite(self.post.a_tilde_star):
            return (self.a_star, self.post.a_tilde_star)
        return (self.a_star,)

    @property
    def c1(self) -> float:
        return self.upper / power(self.a_star, self.p1) if self.case is not CaseTag.CASE_II else 0.0

    @property
    def c2(self) -> float:
        if self.case is not CaseTag.CASE_II or math.isinf(self.post.a_tilde_star):
            return 0.0
        return self.upper / power(self.post.a_tilde_star, self.p1)

    @property
    def c3(self) -> float:
        return self.middle_p1 / power(self.a_star, self.p1) if self.case is CaseTag.CASE_II else 0.0

    @property
    def c4(self) -> float:
        if self.case is not CaseTag.CASE_II or math.isinf(self.post.a_tilde_star):
            return 0.0
        return self.middle_p2 / power(self.post.a_tilde_star, self.p2)


def _scaled(residual: float, *terms: float) -> float:
    return abs(residual) / max(1.0, *(abs(t) for t in terms))


def _solve_case_one(params: ModelParams, post: PostExitSolution) -> float:
    lower = post.a_tilde_star
    at_lower = h_fn(lower, params, post)
    peak = h_peak(params, post)
    if at_lower < 0 or not peak < lower:
        raise SolverError(
            f"case I bracket invalid: H(a_tilde_star)={at_lower:.6g}, peak={peak:.6g}, a_tilde_star={lower:.6g}",
            code="bracket-failure",
        )
    if at_lower == 0:
        return lower
    upper = 2.0 * max(lower, peak)
    for _ in range(MAX_BRACKET_EXPANSIONS):
        if h_fn(upper, params, post) < 0:
            break
        upper *= 2.0
    else:
        raise SolverError("H did not change sign while expanding the bracket", code="bracket-failure")
    return float(brentq(lambda x: h_fn(x, params, post), lower, upper, xtol=ROOT_XTOL * lower, maxiter=500))


def _solve_case_two(params: ModelParams, post: PostExitSolution) -> float:
    m, p, lam2 = params.market, params.profit, params.hazards.lambda2
    if math.isinf(post.a_tilde_star):
        p1 = model_roots(params).p1
        return p1 * p.cap_k * (m.rho + lam2 - m.mu) / ((m.rho + lam2) * (p1 - 1.0))
    upper = post.a_tilde_star
    lower = upper * 1e-12
    if not m_fn(upper, params, post) < 0 < m_fn(lower, params, post):
        raise SolverError(
            f"case II bracket invalid: M(a_tilde_star)={m_fn(upper, params, post):.6g}",
            code="bracket-failure",
        )
    return float(brentq(lambda x: m_fn(x, params, post), lower, upper, xtol=ROOT_XTOL * upper, maxiter=500))


def solve_pre_exit(params: ModelParams, tol: float = CLASSIFICATION_TOL) -> PreExitSolution:
    ensure_valid(params)
    post = solve_post_exit(params)
    roots = model_roots(params)
    p1, p2 = roots.p1, roots.p2
    alpha0 = critical_alpha(params)
    case = classify(params, tol)

    if case is CaseTag.CASE_II:
        solution = _assemble_case_two(params, post, _solve_case_two(params, post), alpha0, p1, p2)
    else:
        a_star = post.a_tilde_star if case is CaseTag.BOUNDARY else _solve_case_one(params, post)
        v1 = particular_upper(params, post, a_star)
        dv1 = particular_upper(params, post, a_star, 1)
        upper = -v1
        pasting = p1 * upper / a_star + dv1
        solution = PreExitSolution(
            case=case,
            a_star=a_star,
            alpha0=alpha0,
            p1=p1,
            p2=p2,
            post=post,
            upper=upper,
            residuals=(_scaled(pasting, dv1, p1 * upper / a_star),),
        )

    worst = max(solution.residuals, default=0.0)
    # at the boundary a* = a~* only up to the classification tolerance on alpha
    limit = RESIDUAL_TOL if case is not CaseTag.BOUNDARY else math.sqrt(tol)
    if worst > limit:
        raise SolverError(f"pre-competition boundary conditions violated, worst residual {worst:.3e}", code="residual-check")
    LOGGER.info(
        "Solved pre-competition exit case=%s a_star=%.12g a_tilde_star=%.12g alpha0=%.12g",
        solution.case.value,
        solution.a_star,
        post.a_tilde_star,
        alpha0,
    )
    return solution


def _assemble_case_two(
    params: ModelParams, post: PostExitSolution, a_star: float, alpha0: float, p1: float, p2: float
) -> PreExitSolution:
    """Coefficients from value matching and smooth pasting at a* and continuity of V, V' at a~*."""
    v2_a = particular_middle(params, a_star)
    dv2_a = particular_middle(params, a_star, 1)
    if math.isinf(post.a_tilde_star):
        middle_p1 = -v2_a
        pasting = p1 * middle_p1 / a_star + dv2_a
        return PreExitSolution(
            case=CaseTag.CASE_II,
            a_star=a_star,
            alpha0=alpha0,
            p1=p1,
            p2=p2,
            post=post,
            upper=0.0,
            middle_p1=middle_p1,
            residuals=(0.0, _scaled(pasting, dv2_a, p1 * middle_p1 / a_star), 0.0, 0.0),
        )

    top = post.a_tilde_star
    gap = particular_upper(params, post, top) - particular_middle(params, top)
    gap_slope = top * (particular_upper(params, post, top, 1) - particular_middle(params, top, 1))
    middle_p2 = (gap_slope - p1 * gap) / (p2 - p1)
    up_ratio = power(a_star / top, p2)
    down_ratio = power(top / a_star, p1)
    middle_p1 = -v2_a - middle_p2 * up_ratio
    upper = middle_p1 * down_ratio - (p2 * gap - gap_slope) / (p2 - p1)

    v1_top = particular_upper(params, post, top)
    v2_top = particular_middle(params, top)
    dv1_top = top * particular_upper(params, post, top, 1)
    dv2_top = top * particular_middle(params, top, 1)
    eq1 = middle_p1 + middle_p2 * up_ratio + v2_a
    eq2 = p1 * middle_p1 + p2 * middle_p2 * up_ratio + a_star * dv2_a
    eq3 = middle_p1 * down_ratio + middle_p2 + v2_top - upper - v1_top
    eq4 = p1 * middle_p1 * down_ratio + p2 * middle_p2 + dv2_top - p1 * upper - dv1_top
    residuals = (
        _scaled(eq1, middle_p1, v2_a),
        _scaled(eq2, p1 * middle_p1, a_star * dv2_a),
        _scaled(eq3, upper, v1_top, v2_top, middle_p2),
        _scaled(eq4, p1 * upper, dv1_top, dv2_top, p2 * middle_p2),
    )
    return PreExitSolution(
        case=CaseTag.CASE_II,
        a_star=a_star,
        alpha0=alpha0,
        p1=p1,
        p2=p2,
        post=post,
        upper=upper,
        middle_p1=middle_p1,
        middle_p2=middle_p2,
        residuals=residuals,
    )


def value_pre(
    sol: PreExitSolution, params: ModelParams, x: ArrayLike, derivative: int = 0
) -> NDArray[np.float64] | float:
    """V(x) and its first two derivatives; 0 at and below a*."""
    if derivative not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    prices = as_price_array(x)
    a_star, p1, p2 = sol.a_star, sol.p1, sol.p2

    def homogeneous(scale: float, anchor: float, exponent: float) -> NDArray[np.float64]:
        term = scale * np.asarray(power(prices / anchor, exponent))
        if derivative >= 1:
            term = term * exponent / prices
        if derivative == 2:
            term = term * (exponent - 1.0) / prices
        return term

    if sol.case is not CaseTag.CASE_II:
        upper = homogeneous(sol.upper, a_star, p1) + particular_upper(params, sol.post, prices, derivative)
        return scalar_or_array(np.where(prices > a_star, upper, 0.0))

    top = sol.post.a_tilde_star
    middle = homogeneous(sol.middle_p1, a_star, p1) + particular_middle(params, prices, derivative)
    if math.isinf(top):
        return scalar_or_array(np.where(prices > a_star, middle, 0.0))
    middle = middle + homogeneous(sol.middle_p2, top, p2)
    upper = homogeneous(sol.upper, top, p1) + particular_upper(params, sol.post, prices, derivative)
    return scalar_or_array(np.where(prices > top, upper, np.where(prices > a_star, middle, 0.0)))
