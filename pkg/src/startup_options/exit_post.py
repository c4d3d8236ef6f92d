"""Post-competition abandonment: closed-form threshold a~* and value function V~."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from startup_options.numerics import as_price_array, power, scalar_or_array
from startup_options.params import ModelParams, char_roots, ensure_valid

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostExitSolution:
    a_tilde_star: float
    k1: float
    coeff_b1: float

    @property
    def breakpoints(self) -> tuple[float, ...]:
        return (self.a_tilde_star,) if math.isfinite(self.a_tilde_star) else ()


def post_exit_threshold(params: ModelParams) -> float:
    """a~* = ((rho - mu)/rho) (k1/(k1 - 1)) (beta/alpha); infinite when alpha = 0."""
    m, p = params.market, params.profit
    if p.alpha == 0:
        return math.inf
    k1 = char_roots(m, 0.0).h1
    return (m.rho - m.mu) / m.rho * (k1 / (k1 - 1.0)) * (p.beta / p.alpha)


def solve_post_exit(params: ModelParams) -> PostExitSolution:
    ensure_valid(params)
    m, p = params.market, params.profit
    k1 = char_roots(m, 0.0).h1
    threshold = post_exit_threshold(params)
    if math.isinf(threshold):
        LOGGER.info("Solved post-competition exit alpha=0 a_tilde_star=inf")
        return PostExitSolution(a_tilde_star=math.inf, k1=k1, coeff_b1=0.0)
    coeff = -p.alpha * power(threshold, 1.0 - k1) / (k1 * (m.rho - m.mu))
    LOGGER.debug("Solved post-competition exit a_tilde_star=%.12g k1=%.12g", threshold, k1)
    return PostExitSolution(a_tilde_star=threshold, k1=k1, coeff_b1=float(coeff))


def threshold_strategy_value(
    params: ModelParams, level: float, x: ArrayLike, derivative: int = 0
) -> NDArray[np.float64] | float:
    """Expected discounted g-flow when abandoning the first time X falls to `level`.

    W(x) = g0(x) - g0(level) (x/level)^k1 above the level and 0 at or below it, with
    g0(x) = alpha x/(rho - mu) - beta/rho. At level = a~* this is V~.
    """
    if derivative not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    prices = as_price_array(x)
    if math.isinf(level):
        return scalar_or_array(np.zeros_like(prices))
    m, p = params.market, params.profit
    k1 = char_roots(m, 0.0).h1
    slope = p.alpha / (m.rho - m.mu)
    anchor = slope * level - p.beta / m.rho
    ratio = power(prices / level, k1)
    if derivative == 0:
        branch = slope * prices - p.beta / m.rho - anchor * ratio
    elif derivative == 1:
        branch = slope - anchor * k1 * ratio / prices
    else:
        branch = -anchor * k1 * (k1 - 1.0) * ratio / prices**2
    return scalar_or_array(np.where(prices > level, branch, 0.0))


def value_post(
    sol: PostExitSolution, params: ModelParams, x: ArrayLike, derivative: int = 0
) -> NDArray[np.float64] | float:
    """V~(x) and its derivatives; 0 at and below a~*.

    Derivatives are the right-hand ones on the continuation branch; at a~* both sides
    agree to first order (smooth pasting).
    """
    if derivative not in (0, 1, 2):
        raise ValueError("derivative order must be 0, 1 or 2")
    prices = as_price_array(x)
    threshold = sol.a_tilde_star
    if math.isinf(threshold):
        return scalar_or_array(np.zeros_like(prices))
    m, p = params.market, params.profit
    k1 = sol.k1
    slope = p.alpha / (m.rho - m.mu)
    # V~'(x) = slope (1 - (a~*/x)^(1 - k1)),  V~''(x) = slope (1 - k1) (a~*/x)^(1 - k1) / x
    decay = power(threshold / prices, 1.0 - k1)
    if derivative == 0:
        branch = -slope * threshold / k1 * power(prices / threshold, k1) + slope * prices - p.beta / m.rho
    elif derivative == 1:
        branch = slope * (1.0 - decay)
    else:
        branch = slope * (1.0 - k1) * decay / prices
    return scalar_or_array(np.where(prices > threshold, branch, 0.0))
