"""Model parameters, standing-assumption checks, cash-flow streams and characteristic roots.

All rate parameters (mu, rho, lambda1, lambda2, and the flow parameters per unit
time) must share one time unit; the library itself is unit-agnostic.

Symbol map: the incubation cost c(x) = a*x + b is stored as ``cost_slope`` (a) and
``cost_intercept`` (b) so that ``a`` stays free for the abandonment thresholds.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel, ConfigDict

from startup_options.errors import ParameterError

LOGGER = logging.getLogger(__name__)

ROOT_RESIDUAL_TOL = 1e-10


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class MarketParams(_Frozen):
    mu: float
    sigma: float
    rho: float


class ProfitParams(_Frozen):
    alpha: float
    beta: float
    cap_k: float


class CostParams(_Frozen):
    cost_slope: float
    cost_intercept: float


class HazardRates(_Frozen):
    lambda1: float
    lambda2: float


# flat key -> (group attribute, field name)
FLAT_FIELDS: dict[str, tuple[str, str]] = {
    "mu": ("market", "mu"),
    "sigma": ("market", "sigma"),
    "rho": ("market", "rho"),
    "alpha": ("profit", "alpha"),
    "beta": ("profit", "beta"),
    "cap_k": ("profit", "cap_k"),
    "cost_slope": ("cost", "cost_slope"),
    "cost_intercept": ("cost", "cost_intercept"),
    "lambda1": ("hazards", "lambda1"),
    "lambda2": ("hazards", "lambda2"),
}


class ModelParams(_Frozen):
    market: MarketParams
    profit: ProfitParams
    cost: CostParams
    hazards: HazardRates

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> "ModelParams":
        unknown = sorted(set(values) - set(FLAT_FIELDS))
        if unknown:
            raise ParameterError(f"Unknown parameter names: {', '.join(unknown)}", code="invalid-scenario")
        missing = sorted(set(FLAT_FIELDS) - set(values))
        if missing:
            raise ParameterError(f"Missing parameter values: {', '.join(missing)}", code="invalid-scenario")
        groups: dict[str, dict[str, float]] = {"market": {}, "profit": {}, "cost": {}, "hazards": {}}
        for key, (group, name) in FLAT_FIELDS.items():
            try:
                groups[group][name] = float(values[key])
            except (TypeError, ValueError) as exc:
                raise ParameterError(f"Parameter {key} is not a number: {values[key]!r}", code="invalid-scenario") from exc
        return cls.model_validate(groups)

    def to_flat(self) -> dict[str, float]:
        return {key: getattr(getattr(self, group), name) for key, (group, name) in FLAT_FIELDS.items()}

    def with_values(self, **overrides: float) -> "ModelParams":
        """Copy with flat-named fields replaced, e.g. ``params.with_values(lambda2=0.5)``."""
        flat = self.to_flat()
        flat.update(overrides)
        return ModelParams.from_flat(flat)


@dataclass(frozen=True)
class Violation:
    field: str
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def infinite_value(self) -> bool:
        return any(item.code == "infinite-value-regime" for item in self.violations)


def validate(params: ModelParams) -> ValidationReport:
    """Check the standing assumptions; never raises."""
    violations: list[Violation] = []
    warnings: list[str] = []

    def require(name: str, ok: bool, message: str) -> None:
        if not ok:
            violations.append(Violation(name, "range", message))

    flat = params.to_flat()
    for name, value in flat.items():
        if not math.isfinite(value):
            violations.append(Violation(name, "range", f"{name} must be finite"))
    if violations:
        return ValidationReport(tuple(violations))

    m, p, c, h = params.market, params.profit, params.cost, params.hazards
    require("mu", m.mu > 0, "mu must be > 0")
    require("sigma", m.sigma > 0, "sigma must be > 0")
    require("rho", m.rho > 0, "rho must be > 0")
    if m.rho <= m.mu:
        violations.append(
            Violation("rho", "infinite-value-regime", "rho <= mu: never exiting is optimal and the value is infinite")
        )
    if p.alpha == 0:
        warnings.append("alpha = 0: post-competition revenue vanishes and the firm exits on the competitor's arrival")
    else:
        require("alpha", 0 < p.alpha <= 1, "alpha must satisfy 0 < alpha <= 1")
    require("beta", p.beta > 0, "beta must be > 0")
    require("cap_k", p.cap_k > 0, "cap_k must be > 0")
    require("cost_slope", c.cost_slope > 0, "cost_slope must be > 0")
    require("cost_intercept", c.cost_intercept > 0, "cost_intercept must be > 0")
    require("lambda1", h.lambda1 >= 0, "lambda1 must be >= 0")
    require("lambda2", h.lambda2 >= 0, "lambda2 must be >= 0")
    return ValidationReport(tuple(violations), tuple(warnings))


def ensure_valid(params: ModelParams, *, log_warnings: bool = False) -> ValidationReport:
    """Raise ParameterError unless `validate` reports no violations."""
    report = validate(params)
    if not report.ok:
        code = "infinite-value-regime" if report.infinite_value else "invalid-params"
        message = "; ".join(item.message for item in report.violations)
        raise ParameterError(message, code=code, details=report)
    if log_warnings:
        for warning in report.warnings:
            LOGGER.warning("Parameter warning: %s", warning)
    return report


@dataclass(frozen=True)
class CharRoots:
    """Roots of (sigma^2/2) h (h - 1) + mu h - (rho + lambda) = 0."""

    lam: float
    h1: float
    h2: float


def char_roots(market: MarketParams, lam: float) -> CharRoots:
    if lam < 0:
        raise ValueError("hazard shift must be non-negative")
    var = market.sigma**2
    shift = 0.5 * var - market.mu
    disc = math.sqrt(shift * shift + 2.0 * var * (market.rho + lam))
    product = -2.0 * (market.rho + lam) / var
    # the root whose closed form adds same-signed terms is taken directly, the other from the Vieta product
    if shift >= 0:
        h2 = (shift + disc) / var
        h1 = product / h2
    else:
        h1 = (shift - disc) / var
        h2 = product / h1
    roots = CharRoots(lam=lam, h1=h1, h2=h2)
    for root in (h1, h2):
        scale = max(1.0, 0.5 * var * root * root, market.rho + lam)
        if abs(quadratic_residual(market, lam, root)) > ROOT_RESIDUAL_TOL * scale:
            raise ArithmeticError(f"root {root} does not solve the characteristic equation for lambda={lam}")
    if not h1 < 0 < h2:
        raise ArithmeticError(f"unexpected root signs h1={h1} h2={h2}")
    if market.rho + lam > market.mu and not h2 > 1:
        raise ArithmeticError(f"positive root must exceed 1 when rho + lambda > mu, got {h2}")
    return roots


@dataclass(frozen=True)
class RootSet:
    """k1 at lambda = 0, (p1, p2) at lambda2, (q1, q2) at lambda1."""

    k: CharRoots
    p: CharRoots
    q: CharRoots

    @property
    def k1(self) -> float:
        return self.k.h1

    @property
    def p1(self) -> float:
        return self.p.h1

    @property
    def p2(self) -> float:
        return self.p.h2

    @property
    def q1(self) -> float:
        return self.q.h1

    @property
    def q2(self) -> float:
        return self.q.h2


def model_roots(params: ModelParams) -> RootSet:
    return RootSet(
        k=char_roots(params.market, 0.0),
        p=char_roots(params.market, params.hazards.lambda2),
        q=char_roots(params.market, params.hazards.lambda1),
    )


def quadratic_residual(market: MarketParams, lam: float, h: float) -> float:
    return 0.5 * market.sigma**2 * h * (h - 1.0) + market.mu * h - (market.rho + lam)


def _prices(x: ArrayLike) -> NDArray[np.float64] | float:
    return float(x) if np.ndim(x) == 0 else np.asarray(x, dtype=float)  # type: ignore[arg-type]


def profit_post(x: ArrayLike, profit: ProfitParams) -> NDArray[np.float64] | float:
    """g(x) = alpha x - beta."""
    return profit.alpha * _prices(x) - profit.beta


def profit_pre(x: ArrayLike, profit: ProfitParams) -> NDArray[np.float64] | float:
    """f(x) = x - K."""
    return _prices(x) - profit.cap_k


def cost_incubation(x: ArrayLike, cost: CostParams) -> NDArray[np.float64] | float:
    """c(x) = cost_slope x + cost_intercept."""
    return cost.cost_slope * _prices(x) + cost.cost_intercept
