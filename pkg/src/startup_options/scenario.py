"""Scenario files, sweeps and tabular output.

A scenario is a TOML file with flat parameter keys, an optional ``[sweep]`` table and an
optional ``[mc]`` table::

    mu = 0.03
    sigma = 0.2
    ...
    [sweep]
    param = "lambda1"
    min = 0.01
    max = 1.0
    n = 25
    spacing = "log"

    [mc]
    n_paths = 200000
    dt = 0.001
    seed = 7
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from startup_options.entry import EntrySolution, solve_entry, value_entry
from startup_options.errors import ParameterError, StartupOptionsError
from startup_options.exit_post import value_post
from startup_options.exit_pre import solve_pre_exit, value_pre
from startup_options.params import FLAT_FIELDS, ModelParams, ensure_valid
from startup_options.simulation import McConfig

LOGGER = logging.getLogger(__name__)

FAILED = "FAILED"
RESULT_COLUMNS = (
    "param",
    "value",
    "case",
    "alpha0",
    "a_tilde_star",
    "a_star",
    "c_star",
    "e_star",
    "residual_pre",
    "residual_entry",
    "warnings",
    "error",
)
TABLE_COLUMNS = ("x", "v_tilde", "v", "psi")
CHECK_COLUMNS = ("check", "passed", "metric", "limit", "detail")


def format_number(value: float) -> str:
    return f"{value:.12g}"


class SweepSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    param: str
    values: list[float] | None = None
    min: float | None = None
    max: float | None = None
    n: int | None = Field(None, ge=0)
    spacing: Literal["linear", "log"] = "linear"

    @model_validator(mode="after")
    def _check(self) -> "SweepSpec":
        if self.param not in FLAT_FIELDS:
            raise ValueError(f"sweep parameter {self.param!r} is not a model parameter")
        ranged = (self.min, self.max, self.n)
        if self.values is None and any(v is None for v in ranged):
            raise ValueError("sweep needs either values or min, max and n")
        if self.values is not None and any(v is not None for v in ranged):
            raise ValueError("sweep takes values or min/max/n, not both")
        if self.values is None and self.spacing == "log" and not (self.min > 0 and self.max > 0):
            raise ValueError("log spacing needs positive min and max")
        return self

    def grid(self) -> list[float]:
        if self.values is not None:
            return [float(v) for v in self.values]
        if self.n == 0:
            return []
        if self.spacing == "log":
            return [float(v) for v in np.geomspace(self.min, self.max, self.n)]
        return [float(v) for v in np.linspace(self.min, self.max, self.n)]


class ScenarioFile(BaseModel):
    model_config = ConfigDict(frozen=True)

    params: ModelParams
    sweep: SweepSpec | None = None
    mc: McConfig | None = None


def parse_assignments(items: Iterable[str]) -> dict[str, float]:
    """Parse repeated ``key=value`` overrides into parameter values."""
    overrides: dict[str, float] = {}
    for item in items:
        key, sep, raw = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParameterError(f"override {item!r} is not of the form key=value", code="invalid-scenario")
        try:
            overrides[key] = float(raw)
        except ValueError as exc:
            raise ParameterError(f"override {item!r} has a non-numeric value", code="invalid-scenario") from exc
    return overrides


def scenario_from_mapping(data: dict[str, Any], overrides: dict[str, float] | None = None) -> ScenarioFile:
    flat = {key: value for key, value in data.items() if key not in ("sweep", "mc")}
    flat.update(overrides or {})
    params = ModelParams.from_flat(flat)
    try:
        sweep = SweepSpec.model_validate(data["sweep"]) if "sweep" in data else None
        mc = McConfig.model_validate(data["mc"]) if "mc" in data else None
    except ValidationError as exc:
        raise ParameterError(f"invalid scenario: {exc.errors()[0]['msg']}", code="invalid-scenario") from exc
    return ScenarioFile(params=params, sweep=sweep, mc=mc)


def load_scenario(path: str | Path, overrides: dict[str, float] | None = None) -> ScenarioFile:
    path = Path(path)
    try:
        with path.open("rb") as handle:
            data = tomllib.load(handle)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ParameterError(f"cannot read scenario {path}: {exc}", code="invalid-scenario") from exc
    scenario = scenario_from_mapping(data, overrides)
    LOGGER.info("Loaded scenario path=%s sweep=%s mc=%s", path, bool(scenario.sweep), bool(scenario.mc))
    return scenario


@dataclass(frozen=True)
class ResultRow:
    param: str = ""
    value: float | None = None
    case: str | None = None
    alpha0: float | None = None
    a_tilde_star: float | None = None
    a_star: float | None = None
    c_star: float | None = None
    e_star: float | None = None
    residual_pre: float | None = None
    residual_entry: float | None = None
    warnings: str = ""
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)

    def as_record(self) -> dict[str, str]:
        """Column -> text, with FAILED in every unsolved numeric column."""
        record: dict[str, str] = {}
        for column in RESULT_COLUMNS:
            cell = getattr(self, column)
            if column in ("param", "warnings", "error"):
                record[column] = cell
            elif column == "value":
                record[column] = "" if cell is None else format_number(cell)
            elif cell is None:
                record[column] = FAILED
            else:
                record[column] = cell if isinstance(cell, str) else format_number(cell)
        return record


def solve_scenario(params: ModelParams) -> EntrySolution:
    report = ensure_valid(params, log_warnings=True)
    pre = solve_pre_exit(params)
    entry = solve_entry(params, pre)
    if report.warnings:
        entry = _with_warnings(entry, report.warnings)
    return entry


def _with_warnings(entry: EntrySolution, extra: Sequence[str]) -> EntrySolution:
    return replace(entry, warnings=tuple(extra) + entry.warnings)


def result_row(entry: EntrySolution, param: str = "", value: float | None = None) -> ResultRow:
    pre = entry.pre
    return ResultRow(
        param=param,
        value=value,
        case=pre.case.value,
        alpha0=pre.alpha0,
        a_tilde_star=pre.post.a_tilde_star,
        a_star=pre.a_star,
        c_star=entry.c_star,
        e_star=entry.e_star,
        residual_pre=max(pre.residuals, default=0.0),
        residual_entry=max(abs(r) for r in entry.residuals),
        warnings="; ".join(entry.warnings),
    )


def _sweep_point(args: tuple[ModelParams, str, float]) -> ResultRow:
    base, param, value = args
    try:
        params = base.with_values(**{param: value})
        return result_row(solve_scenario(params), param, value)
    except StartupOptionsError as exc:
        LOGGER.warning("Sweep point failed %s=%.12g error=%s message=%s", param, value, exc.code, exc.message)
        return ResultRow(param=param, value=value, error=exc.code)


def run_sweep(scenario: ScenarioFile, workers: int = 1) -> list[ResultRow]:
    """One row per grid point, in grid order; failures are recorded in the row."""
    if scenario.sweep is None:
        raise ParameterError("scenario has no [sweep] table", code="invalid-scenario")
    grid = scenario.sweep.grid()
    tasks = [(scenario.params, scenario.sweep.param, value) for value in grid]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        rows = [_sweep_point(task) for task in tasks]
    LOGGER.info(
        "Sweep finished param=%s points=%d failed=%d", scenario.sweep.param, len(rows), sum(r.failed for r in rows)
    )
    return rows


def value_table(params: ModelParams, entry: EntrySolution, lower: float, upper: float, n: int) -> list[dict[str, str]]:
    """Rows of (x, V~, V, psi) on a log grid, for plotting."""
    if not 0 < lower < upper or n < 1:
        raise ParameterError(f"invalid value grid min={lower} max={upper} n={n}")
    x = np.geomspace(lower, upper, n) if n > 1 else np.array([lower])
    series = (
        x,
        np.asarray(value_post(entry.pre.post, params, x)),
        np.asarray(value_pre(entry.pre, params, x)),
        np.asarray(value_entry(entry, params, x)),
    )
    return [
        {column: format_number(float(col[i])) for column, col in zip(TABLE_COLUMNS, series)} for i in range(x.size)
    ]


def json_value(text: str) -> Any:
    """Numbers as JSON numbers; markers, labels and non-finite values stay text."""
    if text in ("", FAILED) or not _is_number(text):
        return text
    number = float(text)
    return number if math.isfinite(number) else text


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def render_records(records: Sequence[dict[str, str]], columns: Sequence[str], fmt: str = "csv") -> str:
    """CSV (comma separated, LF endings) or a JSON array with the same field names."""
    if fmt == "json":
        payload = [json_record(record, columns) for record in records]
        return json.dumps(payload, indent=2) + "\n"
    if fmt != "csv":
        raise ValueError(f"unknown output format {fmt!r}")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(columns)
    for record in records:
        writer.writerow([record[column] for column in columns])
    return buffer.getvalue()


def json_record(record: dict[str, str], columns: Sequence[str]) -> dict[str, Any]:
    return {column: json_value(record[column]) for column in columns}


def render_rows(rows: Sequence[ResultRow], fmt: str = "csv") -> str:
    return render_records([row.as_record() for row in rows], RESULT_COLUMNS, fmt)
