"""Command line: ``startup-options solve|sweep|verify --scenario FILE``.

Tables go to stdout (or --out), logs to stderr. Exit codes: 0 success, 2 invalid
parameters or scenario, 3 solver failure, 4 failed verification.
"""
from __future__ import annotations

import functools
import logging
from pathlib import Path
from typing import Any, Callable

import click
from pydantic import ValidationError

from startup_options.errors import ParameterError, SolverError, StartupOptionsError, VerificationError
from startup_options.logging import configure_logging
from startup_options.scenario import (
    CHECK_COLUMNS,
    TABLE_COLUMNS,
    format_number,
    load_scenario,
    parse_assignments,
    render_records,
    render_rows,
    result_row,
    run_sweep,
    solve_scenario,
    value_table,
)
from startup_options.simulation import McConfig
from startup_options.verify import ThresholdSelector, run_verification

LOGGER = logging.getLogger(__name__)

_PARAMETER_CODES = {"invalid-params", "infinite-value-regime", "invalid-scenario"}


def _emit(text: str, out: Path | None) -> None:
    if out is None:
        click.echo(text, nl=False)
    else:
        out.write_text(text, encoding="utf-8")
        LOGGER.info("Wrote %s", out)


def _handle_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    @functools.wraps(command)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return command(*args, **kwargs)
        except StartupOptionsError as exc:
            click.echo(f"error={exc.code} message={exc.message}", err=True)
            raise SystemExit(exc.exit_code) from exc

    return wrapper


def _scenario_options(command: Callable[..., Any]) -> Callable[..., Any]:
    options = [
        click.option("--scenario", "scenario_path", type=click.Path(path_type=Path), required=True, help="Scenario TOML file"),
        click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE", help="Override a parameter (repeatable)"),
        click.option("--out", type=click.Path(path_type=Path, dir_okay=False), help="Write the table here instead of stdout"),
        click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True),
    ]
    for option in reversed(options):
        command = option(command)
    return command


@click.group()
@click.version_option(package_name="startup-options")
@click.option("--log-level", default=None, help="Logging level; defaults to LOG_LEVEL or INFO")
def cli(log_level: str | None) -> None:
    """Entry, cancellation and abandonment thresholds for a start-up facing a competitor."""
    configure_logging(log_level)


@cli.command()
@_scenario_options
@click.option("--table-out", type=click.Path(path_type=Path, dir_okay=False), help="Write the (x, V~, V, psi) grid here")
@click.option("--grid-min", type=float, help="Smallest price of the value table [default: c*/2]")
@click.option("--grid-max", type=float, help="Largest price of the value table [default: 2 e*]")
@click.option("--grid-n", type=int, default=200, show_default=True, help="Number of log-spaced prices")
@_handle_errors
def solve(scenario_path, assignments, out, fmt, table_out, grid_min, grid_max, grid_n) -> None:
    """Solve one scenario and print its thresholds."""
    scenario = load_scenario(scenario_path, parse_assignments(assignments))
    entry = solve_scenario(scenario.params)
    _emit(render_rows([result_row(entry)], fmt), out)
    if table_out is not None:
        lower = grid_min if grid_min is not None else 0.5 * entry.c_star
        upper = grid_max if grid_max is not None else 2.0 * entry.e_star
        records = value_table(scenario.params, entry, lower, upper, grid_n)
        _emit(render_records(records, TABLE_COLUMNS, fmt), table_out)


@cli.command()
@_scenario_options
@click.option("--workers", type=int, default=1, show_default=True, help="Processes used for grid points")
@_handle_errors
def sweep(scenario_path, assignments, out, fmt, workers) -> None:
    """Solve every point of the scenario's [sweep] grid."""
    scenario = load_scenario(scenario_path, parse_assignments(assignments))
    rows = run_sweep(scenario, workers=max(1, workers))
    _emit(render_rows(rows, fmt), out)
    failed = [row for row in rows if row.failed]
    if failed:
        codes = {row.error for row in failed}
        error = ParameterError if codes <= _PARAMETER_CODES else SolverError
        raise error(f"{len(failed)} of {len(rows)} sweep points failed", code=sorted(codes)[0])


@cli.command()
@_scenario_options
@click.option("--seed", type=int, help="Override [mc] seed")
@click.option("--paths", type=int, help="Override [mc] n_paths")
@click.option("--dt", type=float, help="Override [mc] dt")
@click.option(
    "--threshold",
    "thresholds",
    multiple=True,
    metavar="NAME=VALUE",
    help=f"Replace an analytic threshold ({', '.join(s.value for s in ThresholdSelector)})",
)
@_handle_errors
def verify(scenario_path, assignments, out, fmt, seed, paths, dt, thresholds) -> None:
    """Check the solution against Monte Carlo, the killing identity, perturbations and ODE residuals."""
    scenario = load_scenario(scenario_path, parse_assignments(assignments))
    updates = {key: value for key, value in (("seed", seed), ("n_paths", paths), ("dt", dt)) if value is not None}
    base = scenario.mc.model_dump() if scenario.mc is not None else {}
    try:
        cfg = McConfig.model_validate({**base, **updates})
    except ValidationError as exc:
        raise ParameterError(f"invalid Monte Carlo settings: {exc.errors()[0]['msg']}", code="invalid-scenario") from exc
    overrides = parse_assignments(thresholds)
    unknown = sorted(set(overrides) - {s.value for s in ThresholdSelector})
    if unknown:
        raise ParameterError(f"unknown thresholds: {', '.join(unknown)}", code="invalid-scenario")

    report = run_verification(scenario.params, cfg, overrides=overrides or None)
    records = [
        {
            "check": check.name,
            "passed": "true" if check.passed else "false",
            "metric": format_number(check.metric),
            "limit": format_number(check.limit),
            "detail": check.detail,
        }
        for check in report.checks
    ]
    _emit(render_records(records, CHECK_COLUMNS, fmt), out)
    if not report.passed:
        failed = sum(not check.passed for check in report.checks)
        raise VerificationError(f"{failed} of {len(report.checks)} checks failed")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
