"""Monte Carlo valuation of threshold strategies under GBM with two exponential clocks.

Prices move by exact log-normal steps on a fixed grid; threshold crossings are detected
at grid times, clock events inside a step split that step's trapezoid at the event time.
Paths are grouped in blocks; block b draws from Philox keyed by (seed, b), first the two
clock uniforms for every path, then normals in chunks of CHUNK_STEPS steps. Per-path
streams therefore do not depend on the strategy, so two strategies simulated with the
same McConfig share their random numbers.

A chunk is handled in one pass per stage: the live paths' log prices come from a
cumulative sum over the chunk, each stage finds its first event per path on the whole
chunk, and the trapezoid flows before that event are summed under a step mask.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, model_validator

from startup_options.errors import ParameterError
from startup_options.exit_post import threshold_strategy_value
from startup_options.params import (
    MarketParams,
    ModelParams,
    cost_incubation,
    ensure_valid,
    profit_post,
    profit_pre,
)

if TYPE_CHECKING:
    from startup_options.entry import EntrySolution

LOGGER = logging.getLogger(__name__)

CHUNK_STEPS = 32
HORIZON_CAP = 500.0
HORIZON_TAIL = 1e-4

# path states
_PRE_ENTRY, _POST_ENTRY, _POST_COMPETITION, _DONE = 0, 1, 2, 3


class Stage(str, Enum):
    POST_COMPETITION = "PostCompetition"
    POST_ENTRY = "PostEntry"
    PRE_ENTRY = "PreEntry"


class ClockMode(str, Enum):
    """Treatment of the competitor's arrival once the firm has entered."""

    SWITCH = "switch"  # simulate the arrival and continue under g with the post-competition rule
    TERMINAL = "terminal"  # simulate the arrival and collect the closed-form value of the post rule
    KILLED = "killed"  # no arrival: discount at rho + lambda2 with inflow f + lambda2 W


@dataclass(frozen=True)
class ThresholdStrategy:
    cancel_at: float
    enter_at: float
    abandon_pre_at: float
    abandon_post_at: float

    def __post_init__(self) -> None:
        for name in ("cancel_at", "enter_at", "abandon_pre_at", "abandon_post_at"):
            value = getattr(self, name)
            if math.isnan(value) or value <= 0:
                raise ParameterError(f"{name} must be positive, got {value}")
        if self.cancel_at > self.enter_at:
            raise ParameterError(f"cancel_at={self.cancel_at} exceeds enter_at={self.enter_at}")

    @classmethod
    def from_solution(cls, solution: "EntrySolution") -> "ThresholdStrategy":
        return cls(
            cancel_at=solution.c_star,
            enter_at=solution.e_star,
            abandon_pre_at=solution.pre.a_star,
            abandon_post_at=solution.pre.post.a_tilde_star,
        )

    def replace(self, **changes: float) -> "ThresholdStrategy":
        return dataclasses.replace(self, **changes)


class McConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_paths: int = Field(100_000, ge=1)
    dt: float = Field(1e-3, gt=0)
    horizon: float | None = Field(None, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    antithetic: bool = False
    block_size: int = Field(4096, ge=2)

    @model_validator(mode="after")
    def _pairs_fit(self) -> "McConfig":
        if self.antithetic and (self.n_paths % 2 or self.block_size % 2):
            raise ValueError("antithetic sampling needs even n_paths and block_size")
        return self

    def horizon_for(self, market: MarketParams) -> float:
        """Explicit horizon, or the time after which e^{-(rho - mu) t} < 1e-4, capped at 500."""
        if self.horizon is not None:
            return self.horizon
        return min(HORIZON_CAP, math.log(1.0 / HORIZON_TAIL) / (market.rho - market.mu))


@dataclass(frozen=True)
class McEstimate:
    mean: float
    std_err: float
    n_paths: int
    truncation_bound: float
    horizon: float
    dt: float
    warnings: tuple[str, ...] = ()


def truncation_bound(params: ModelParams, x0: float, horizon: float) -> float:
    """Bound on the discounted flows beyond the horizon.

    Every flow is bounded by s x + m with s = max(1, alpha, cost_slope) and
    m = max(K, beta, cost_intercept), E[X_t] = x0 e^{mu t}, so the tail is at most
    e^{-(rho - mu) T} (s x0/(rho - mu) + m/rho). The same bound covers the killed form,
    whose extra inflow lambda2 W is discounted at the extra rate lambda2.
    """
    m, p, c = params.market, params.profit, params.cost
    slope = max(1.0, p.alpha, c.cost_slope)
    level = max(p.cap_k, p.beta, c.cost_intercept)
    return math.exp(-(m.rho - m.mu) * horizon) * (slope * x0 / (m.rho - m.mu) + level / m.rho)


def variance_warning(params: ModelParams) -> str | None:
    m = params.market
    if 2.0 * (m.rho - m.mu) <= m.sigma**2:
        return (
            "2(rho - mu) <= sigma^2: the discounted NPV has infinite variance and "
            "standard errors are unreliable"
        )
    return None


def _block_sizes(cfg: McConfig) -> list[int]:
    full, rest = divmod(cfg.n_paths, cfg.block_size)
    return [cfg.block_size] * full + ([rest] if rest else [])


def _generator(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))


@dataclass(frozen=True)
class _Chunk:
    """Price paths of the live paths over one chunk; column 0 is the chunk start."""

    log_prices: NDArray[np.float64]
    prices: NDArray[np.float64]
    times: NDArray[np.float64]

    @property
    def steps(self) -> int:
        return self.times.size - 1


def _first_event(events: NDArray[np.bool_], begin: NDArray[np.intp]) -> NDArray[np.intp]:
    """Per row, the first step at or after `begin` where an event fires, or the step count."""
    live = events & (np.arange(events.shape[1]) >= begin[:, None])
    return np.where(live.any(axis=1), live.argmax(axis=1), events.shape[1])


def _sum_steps(flows: NDArray[np.float64], begin: NDArray[np.intp], end: NDArray[np.intp]) -> NDArray[np.float64]:
    cols = np.arange(flows.shape[1])
    inside = (cols >= begin[:, None]) & (cols < end[:, None])
    return np.sum(np.where(inside, flows, 0.0), axis=1)


class _PathEngine:
    """Vectorised path simulation for one (params, strategy, stage, x0, config, mode)."""

    def __init__(
        self,
        params: ModelParams,
        strategy: ThresholdStrategy,
        stage: Stage,
        x0: float,
        cfg: McConfig,
        mode: ClockMode,
    ) -> None:
        self.params = params
        self.strategy = strategy
        self.stage = stage
        self.x0 = x0
        self.cfg = cfg
        self.mode = mode
        self.dt = cfg.dt
        self.steps = max(1, math.ceil(cfg.horizon_for(params.market) / cfg.dt - 1e-9))
        self.horizon = self.steps * cfg.dt
        self.sizes = _block_sizes(cfg)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    # flows
    def _cost(self, x):
        return cost_incubation(x, self.params.cost)

    def _pre(self, x):
        return profit_pre(x, self.params.profit)

    def _post(self, x):
        return profit_post(x, self.params.profit)

    def _post_rule_value(self, x):
        return np.asarray(threshold_strategy_value(self.params, self.strategy.abandon_post_at, x))

    def _killed_flow(self, x):
        return self._pre(x) + self.params.hazards.lambda2 * self._post_rule_value(x)

    def _initial_state(self) -> int:
        s, x0 = self.strategy, self.x0
        if self.stage is Stage.POST_COMPETITION:
            return _DONE if x0 <= s.abandon_post_at else _POST_COMPETITION
        if self.stage is Stage.PRE_ENTRY:
            if x0 <= s.cancel_at:
                return _DONE
            if x0 < s.enter_at:
                return _PRE_ENTRY
        return _DONE if x0 <= s.abandon_pre_at else _POST_ENTRY

    def _half(self, size: int) -> int:
        return size // 2 if self.cfg.antithetic else size

    def _uniforms(self, gen: np.random.Generator, size: int) -> NDArray[np.float64]:
        u = gen.random((self._half(size), 2))
        return np.concatenate([u, 1.0 - u]) if self.cfg.antithetic else u

    def _normals(self, gen: np.random.Generator, size: int, k: int) -> NDArray[np.float64]:
        z = gen.standard_normal((self._half(size), k))
        return np.concatenate([z, -z]) if self.cfg.antithetic else z

    def run(self) -> NDArray[np.float64]:
        """Discounted NPV per path, in path order."""
        n = self.cfg.n_paths
        initial = self._initial_state()
        if initial == _DONE:
            return np.zeros(n)

        m, h = self.params.market, self.params.hazards
        gens = [_generator(self.cfg.seed, b) for b in range(len(self.sizes))]
        uniforms = np.concatenate([self._uniforms(g, size) for g, size in zip(gens, self.sizes)])
        with np.errstate(divide="ignore"):
            exp_draws = -np.log1p(-uniforms)
            kill_time = exp_draws[:, 0] / h.lambda1 if h.lambda1 > 0 else np.full(n, np.inf)
            arrival_delay = exp_draws[:, 1] / h.lambda2 if h.lambda2 > 0 else np.full(n, np.inf)

        state = np.full(n, initial, dtype=np.int8)
        log_x = np.full(n, math.log(self.x0))
        value = np.zeros(n)
        arrival = np.full(n, np.inf)
        if initial == _POST_ENTRY and self.mode is not ClockMode.KILLED:
            arrival[:] = arrival_delay

        drift = (m.mu - 0.5 * m.sigma**2) * self.dt
        vol = m.sigma * math.sqrt(self.dt)
        z = np.empty((n, CHUNK_STEPS))

        for start in range(0, self.steps, CHUNK_STEPS):
            k = min(CHUNK_STEPS, self.steps - start)
            for b, gen in enumerate(gens):
                lo, hi = self.offsets[b], self.offsets[b + 1]
                if np.any(state[lo:hi] != _DONE):
                    z[lo:hi, :k] = self._normals(gen, hi - lo, k)
            alive = np.flatnonzero(state != _DONE)
            if alive.size == 0:
                break

            steps = np.cumsum(drift + vol * z[alive, :k], axis=1)
            log_paths = np.concatenate([log_x[alive, None], log_x[alive, None] + steps], axis=1)
            chunk = _Chunk(log_paths, np.exp(log_paths), (start + np.arange(k + 1)) * self.dt)
            st, val, ta = state[alive], value[alive], arrival[alive]
            # local step from which each path runs in its current state
            begin = np.zeros(alive.size, dtype=np.intp)

            self._run_pre_entry(chunk, st, val, ta, begin, kill_time[alive], arrival_delay[alive])
            self._run_post_entry(chunk, st, val, ta, begin)
            self._run_post_competition(chunk, st, val, begin)

            log_x[alive] = log_paths[:, -1]
            state[alive], value[alive], arrival[alive] = st, val, ta

        return value

    def _trapezoid(self, chunk: "_Chunk", rows, flow, rate: float) -> NDArray[np.float64]:
        """Discounted trapezoid flow of every step, shape (rows, steps)."""
        weighted = np.exp(-rate * chunk.times) * flow(chunk.prices[rows])
        return 0.5 * self.dt * (weighted[:, :-1] + weighted[:, 1:])

    def _partial(self, chunk: "_Chunk", rows, step, when, flow, rate: float):
        """Trapezoid flow from the start of `step` to the event time `when` inside it."""
        log0 = chunk.log_prices[rows, step]
        log1 = chunk.log_prices[rows, step + 1]
        t0 = chunk.times[step]
        theta = (when - t0) / self.dt
        x_mid = np.exp(log0 + theta * (log1 - log0))
        part = 0.5 * theta * self.dt * (np.exp(-rate * t0) * flow(np.exp(log0)) + np.exp(-rate * when) * flow(x_mid))
        return part, x_mid, theta

    def _run_pre_entry(self, chunk, st, val, ta, begin, kill, delay) -> None:
        """Incubation: pay c until the project is killed, cancelled or launched."""
        rows = np.flatnonzero(st == _PRE_ENTRY)
        if rows.size == 0:
            return
        s, rho = self.strategy, self.params.market.rho
        x_end = chunk.prices[rows, 1:]
        killed = kill[rows, None] <= chunk.times[None, 1:]
        events = killed | (x_end <= s.cancel_at) | (x_end >= s.enter_at)
        first = _first_event(events, begin[rows])
        flows = self._trapezoid(chunk, rows, self._cost, rho)
        val[rows] -= _sum_steps(flows, begin[rows], first)

        hit = np.flatnonzero(first < chunk.steps)
        step = first[hit]
        by_kill = killed[hit, step]
        ik = rows[hit[by_kill]]
        if ik.size:
            part, _, _ = self._partial(chunk, ik, step[by_kill], kill[ik], self._cost, rho)
            val[ik] -= part
            st[ik] = _DONE

        local, step = hit[~by_kill], step[~by_kill]
        ib = rows[local]
        val[ib] -= flows[local, step]
        x_hit = chunk.prices[ib, step + 1]
        cancelled = x_hit <= s.cancel_at
        st[ib[cancelled]] = _DONE
        entering, step, x_hit = ib[~cancelled], step[~cancelled], x_hit[~cancelled]
        st[entering] = _POST_ENTRY
        begin[entering] = step + 1
        if self.mode is not ClockMode.KILLED:
            ta[entering] = chunk.times[step + 1] + delay[entering]
        st[entering[x_hit <= s.abandon_pre_at]] = _DONE

    def _run_post_entry(self, chunk, st, val, ta, begin) -> None:
        """Launched, no competitor yet: collect f until abandonment or the competitor's arrival."""
        rows = np.flatnonzero(st == _POST_ENTRY)
        if rows.size == 0:
            return
        s, m, h = self.strategy, self.params.market, self.params.hazards
        x_end = chunk.prices[rows, 1:]
        if self.mode is ClockMode.KILLED:
            arrives = np.zeros_like(x_end, dtype=bool)
            flows = self._trapezoid(chunk, rows, self._killed_flow, m.rho + h.lambda2)
        else:
            arrives = ta[rows, None] <= chunk.times[None, 1:]
            flows = self._trapezoid(chunk, rows, self._pre, m.rho)
        first = _first_event(arrives | (x_end <= s.abandon_pre_at), begin[rows])
        val[rows] += _sum_steps(flows, begin[rows], first)

        hit = np.flatnonzero(first < chunk.steps)
        step = first[hit]
        arrived = arrives[hit, step]
        local = hit[~arrived]
        val[rows[local]] += flows[local, step[~arrived]]
        st[rows[local]] = _DONE
        if np.any(arrived):
            self._arrive(chunk, rows[hit[arrived]], step[arrived], st, val, ta, begin)

    def _arrive(self, chunk, rows, step, st, val, ta, begin) -> None:
        """Competitor arrives inside the step: f up to the arrival, then the post-competition rule."""
        rho, s = self.params.market.rho, self.strategy
        part, x_mid, theta = self._partial(chunk, rows, step, ta[rows], self._pre, rho)
        val[rows] += part
        d_mid = np.exp(-rho * ta[rows])
        if self.mode is ClockMode.TERMINAL:
            val[rows] += d_mid * self._post_rule_value(x_mid)
            st[rows] = _DONE
            return
        stay = x_mid > s.abandon_post_at
        st[rows[~stay]] = _DONE
        ic, step = rows[stay], step[stay]
        x_end = chunk.prices[ic, step + 1]
        d_end = np.exp(-rho * chunk.times[step + 1])
        val[ic] += 0.5 * (1.0 - theta[stay]) * self.dt * (d_mid[stay] * self._post(x_mid[stay]) + d_end * self._post(x_end))
        st[ic] = _POST_COMPETITION
        begin[ic] = step + 1
        st[ic[x_end <= s.abandon_post_at]] = _DONE

    def _run_post_competition(self, chunk, st, val, begin) -> None:
        """Competitor in the market: collect g until the post-competition exit."""
        rows = np.flatnonzero(st == _POST_COMPETITION)
        if rows.size == 0:
            return
        events = chunk.prices[rows, 1:] <= self.strategy.abandon_post_at
        first = _first_event(events, begin[rows])
        flows = self._trapezoid(chunk, rows, self._post, self.params.market.rho)
        # the exit step itself is collected in full
        val[rows] += _sum_steps(flows, begin[rows], np.minimum(first + 1, chunk.steps))
        st[rows[first < chunk.steps]] = _DONE

    def sample_units(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Independent sampling units: paths, or antithetic pair means."""
        if not self.cfg.antithetic:
            return values
        units = []
        for b in range(len(self.sizes)):
            lo, hi = self.offsets[b], self.offsets[b + 1]
            half = (hi - lo) // 2
            units.append(0.5 * (values[lo : lo + half] + values[lo + half : hi]))
        return np.concatenate(units)


def simulate_samples(
    params: ModelParams,
    strategy: ThresholdStrategy,
    stage: Stage,
    x0: float,
    cfg: McConfig,
    mode: ClockMode = ClockMode.SWITCH,
) -> tuple[NDArray[np.float64], float]:
    """Per-unit discounted NPV samples (antithetic pairs averaged) and the simulated horizon."""
    ensure_valid(params)
    if not (math.isfinite(x0) and x0 > 0):
        raise ParameterError(f"x0 must be a positive price, got {x0}")
    engine = _PathEngine(params, strategy, Stage(stage), x0, cfg, mode)
    return engine.sample_units(engine.run()), engine.horizon


def summarize(samples: NDArray[np.float64]) -> tuple[float, float]:
    """Mean and standard error of independent samples; a single sample has zero error."""
    mean = float(np.mean(samples))
    if samples.size < 2:
        return mean, 0.0
    return mean, float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def simulate_npv(
    params: ModelParams,
    strategy: ThresholdStrategy,
    stage: Stage,
    x0: float,
    cfg: McConfig,
    mode: ClockMode = ClockMode.SWITCH,
) -> McEstimate:
    samples, horizon = simulate_samples(params, strategy, stage, x0, cfg, mode)
    mean, std_err = summarize(samples)
    warnings = tuple(w for w in (variance_warning(params),) if w)
    for warning in warnings:
        LOGGER.warning(warning)
    estimate = McEstimate(
        mean=mean,
        std_err=std_err,
        n_paths=cfg.n_paths,
        truncation_bound=truncation_bound(params, x0, horizon),
        horizon=horizon,
        dt=cfg.dt,
        warnings=warnings,
    )
    LOGGER.info(
        "Simulated stage=%s mode=%s x0=%.6g mean=%.12g std_err=%.3g paths=%d",
        Stage(stage).value,
        mode.value,
        x0,
        estimate.mean,
        estimate.std_err,
        cfg.n_paths,
    )
    return estimate
