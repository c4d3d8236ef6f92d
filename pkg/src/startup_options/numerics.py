"""Small numerical helpers: log-space powers and a damped Newton iteration."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

LOGGER = logging.getLogger(__name__)


def power(x: ArrayLike, exponent: float) -> NDArray[np.float64] | float:
    """x**exponent evaluated as exp(exponent * ln x) for x > 0."""
    result = np.exp(exponent * np.log(np.asarray(x, dtype=float)))
    return float(result) if np.ndim(result) == 0 else result


def as_price_array(x: ArrayLike) -> NDArray[np.float64]:
    prices = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(prices)) or np.any(prices <= 0.0):
        raise ValueError("prices must be finite and strictly positive")
    return prices


def scalar_or_array(values: NDArray[np.float64]) -> NDArray[np.float64] | float:
    return float(values) if np.ndim(values) == 0 else values


@dataclass(frozen=True)
class NewtonResult:
    x: NDArray[np.float64]
    fun: NDArray[np.float64]
    nit: int
    success: bool
    message: str


def finite_difference_jacobian(
    fun: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    x: NDArray[np.float64],
    fx: NDArray[np.float64],
    rel_step: float = 1e-7,
) -> NDArray[np.float64]:
    jac = np.empty((fx.size, x.size))
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        shifted = x.copy()
        shifted[j] += h
        jac[:, j] = (fun(shifted) - fx) / h
    return jac


def damped_newton(
    fun: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    x0: ArrayLike,
    *,
    xtol: float = 1e-12,
    ftol: float = 1e-15,
    maxiter: int = 200,
    max_halvings: int = 40,
) -> NewtonResult:
    """Newton's method with a finite-difference Jacobian and step halving on the residual norm.

    `fun` may return non-finite values for inadmissible points; such trial points are
    treated like a failed decrease and the step is halved.
    """
    x = np.array(x0, dtype=float)
    fx = np.asarray(fun(x), dtype=float)
    if not np.all(np.isfinite(fx)):
        return NewtonResult(x, fx, 0, False, "residual is not finite at the initial guess")
    norm = float(np.linalg.norm(fx))

    for iteration in range(1, maxiter + 1):
        if norm <= ftol:
            return NewtonResult(x, fx, iteration - 1, True, "residual below tolerance")
        jac = finite_difference_jacobian(fun, x, fx)
        try:
            step = np.linalg.solve(jac, -fx)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(jac, -fx, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return NewtonResult(x, fx, iteration, False, "Newton step is not finite")

        scale = 1.0
        for _ in range(max_halvings):
            trial = x + scale * step
            f_trial = np.asarray(fun(trial), dtype=float)
            if np.all(np.isfinite(f_trial)):
                trial_norm = float(np.linalg.norm(f_trial))
                if trial_norm < (1.0 - 1e-4 * scale) * norm or trial_norm <= ftol:
                    break
            scale *= 0.5
        else:
            converged = float(np.max(np.abs(step))) <= xtol * 1e3
            message = "no decrease along Newton direction"
            return NewtonResult(x, fx, iteration, converged, message)

        x, fx, norm = trial, f_trial, trial_norm
        LOGGER.debug("Newton iteration=%d residual_norm=%.3e damping=%.3g", iteration, norm, scale)
        if float(np.max(np.abs(scale * step))) <= xtol:
            return NewtonResult(x, fx, iteration, True, "step below tolerance")

    return NewtonResult(x, fx, maxiter, False, "iteration limit reached")
