from __future__ import annotations

import logging
import os
from typing import Any

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from startup_options import __version__
from startup_options.errors import ParameterError, SolverError
from startup_options.logging import add_request_logging_middleware, configure_logging
from startup_options.params import ModelParams
from startup_options.scenario import (
    RESULT_COLUMNS,
    TABLE_COLUMNS,
    ScenarioFile,
    SweepSpec,
    json_record,
    result_row,
    run_sweep,
    solve_scenario,
    value_table,
)

configure_logging()
LOGGER = logging.getLogger(__name__)

app = FastAPI(
    title="Start-up Options Service",
    description="Solves entry, cancellation and abandonment thresholds for a start-up facing competition.",
    version=__version__,
)
add_request_logging_middleware(app)


class SolveRequest(BaseModel):
    params: dict[str, float]
    grid_min: float | None = None
    grid_max: float | None = None
    grid_n: int = Field(0, ge=0, le=10_000)


class SweepRequest(BaseModel):
    params: dict[str, float]
    sweep: SweepSpec


def _http_error(exc: ParameterError | SolverError) -> HTTPException:
    status = 422 if isinstance(exc, ParameterError) else 500
    return HTTPException(status_code=status, detail={"code": exc.code, "message": exc.message})


@app.get("/health", tags=["system"])
async def health() -> dict[str, str]:
    return {"status": "ok"}


@app.get("/")
async def root() -> dict[str, object]:
    return {
        "message": "Start-up options service is running",
        "status": "healthy",
        "endpoints": {
            "health": "GET /health - Readiness check",
            "solve": "POST /solve - Thresholds for one parameter set, optional value table",
            "sweep": "POST /sweep - One result row per grid value of a swept parameter",
        },
        "version": __version__,
    }


@app.post("/solve", tags=["solver"])
def solve(request: SolveRequest) -> dict[str, Any]:
    try:
        params = ModelParams.from_flat(request.params)
        entry = solve_scenario(params)
        payload: dict[str, Any] = {"row": json_record(result_row(entry).as_record(), RESULT_COLUMNS)}
        if request.grid_n:
            lower = request.grid_min if request.grid_min is not None else 0.5 * entry.c_star
            upper = request.grid_max if request.grid_max is not None else 2.0 * entry.e_star
            table = value_table(params, entry, lower, upper, request.grid_n)
            payload["table"] = [json_record(record, TABLE_COLUMNS) for record in table]
    except (ParameterError, SolverError) as exc:
        LOGGER.warning("Solve failed code=%s message=%s", exc.code, exc.message)
        raise _http_error(exc) from exc
    LOGGER.info("Solved request case=%s", payload["row"]["case"])
    return payload


@app.post("/sweep", tags=["solver"])
def sweep(request: SweepRequest) -> dict[str, Any]:
    try:
        scenario = ScenarioFile(params=ModelParams.from_flat(request.params), sweep=request.sweep)
        rows = run_sweep(scenario)
    except (ParameterError, SolverError) as exc:
        LOGGER.warning("Sweep failed code=%s message=%s", exc.code, exc.message)
        raise _http_error(exc) from exc
    return {"param": request.sweep.param, "rows": [json_record(row.as_record(), RESULT_COLUMNS) for row in rows]}


def run() -> None:
    import uvicorn

    host = os.getenv("HOST", "0.0.0.0")
    port = int(os.getenv("PORT", "8000"))
    uvicorn.run("startup_options.main:app", host=host, port=port, reload=False)


if __name__ == "__main__":
    run()
