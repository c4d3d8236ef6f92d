"""Logging setup shared by the command line and the HTTP service."""
import json
import logging
import os
import sys
import time
from typing import IO, Any

from dotenv import dotenv_values
from fastapi import FastAPI, Request


_DEFAULT_LOG_LEVEL = "INFO"
_LOG_LEVELS = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARNING": logging.WARNING,
    "WARN": logging.WARN,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
}
_MAX_BODY_LOG_BYTES = 2_048


def resolve_log_level(raw_level: str | None = None) -> tuple[int, str | None]:
    """Level from the argument, LOG_LEVEL or a LOG_LEVEL= line in ./.env; INFO otherwise."""
    raw_level = raw_level or os.getenv("LOG_LEVEL") or dotenv_values(".env").get("LOG_LEVEL")
    if raw_level is None or not raw_level.strip():
        return _LOG_LEVELS[_DEFAULT_LOG_LEVEL], None
    normalized = raw_level.strip().upper()
    if normalized in _LOG_LEVELS:
        return _LOG_LEVELS[normalized], None
    accepted = ", ".join(_LOG_LEVELS)
    return _LOG_LEVELS[_DEFAULT_LOG_LEVEL], f"Invalid LOG_LEVEL '{raw_level}'; using INFO. Accepted values: {accepted}"


def configure_logging(level: int | str | None = None, stream: IO[str] | None = None) -> None:
    """Install one handler on the root logger; records go to stderr unless `stream` is given."""
    if isinstance(level, int):
        resolved_level, startup_message = level, None
    else:
        resolved_level, startup_message = resolve_log_level(level)
    handler = logging.StreamHandler(stream or sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s | %(levelname)s | %(name)s | %(message)s"))
    root = logging.getLogger()
    root.setLevel(resolved_level)
    root.handlers.clear()
    root.addHandler(handler)
    if startup_message:
        logging.getLogger(__name__).info(startup_message)


def add_request_logging_middleware(app: FastAPI) -> None:
    """Time every request; at DEBUG also summarise the solver payload of JSON requests."""
    logger = logging.getLogger("startup_options.request")

    @app.middleware("http")
    async def log_requests(request: Request, call_next):  # type: ignore[no-untyped-def]
        started = time.perf_counter()
        logger.info("HTTP request started method=%s path=%s", request.method, request.url.path)
        if logger.isEnabledFor(logging.DEBUG) and "application/json" in request.headers.get("content-type", "").lower():
            body = await request.body()
            logger.debug("Request payload path=%s %s", request.url.path, describe_payload(body))

            async def receive() -> dict:
                # hand the consumed body back to the route handler
                return {"type": "http.request", "body": body, "more_body": False}

            request._receive = receive  # type: ignore[attr-defined]
        try:
            response = await call_next(request)
        except Exception:
            duration_ms = (time.perf_counter() - started) * 1000
            logger.exception("HTTP request failed method=%s path=%s duration_ms=%.2f", request.method, request.url.path, duration_ms)
            raise
        duration_ms = (time.perf_counter() - started) * 1000
        logger.info(
            "HTTP request completed method=%s path=%s status_code=%s duration_ms=%.2f",
            request.method,
            request.url.path,
            response.status_code,
            duration_ms,
        )
        return response


def describe_payload(body: bytes) -> str:
    """One-line summary of a /solve or /sweep body: parameters, sweep size and value grid."""
    try:
        payload = json.loads(body)
    except (json.JSONDecodeError, UnicodeDecodeError):
        text = body[:_MAX_BODY_LOG_BYTES].decode("utf-8", errors="replace")
        if len(body) > _MAX_BODY_LOG_BYTES:
            text = f"{text}... [truncated {len(body) - _MAX_BODY_LOG_BYTES} bytes]"
        return f"unparsed={text}"
    if not isinstance(payload, dict):
        return f"unexpected={type(payload).__name__}"

    parts = []
    params = payload.get("params")
    if isinstance(params, dict):
        parts.append("params=" + ",".join(f"{key}={value}" for key, value in sorted(params.items())))
    sweep = payload.get("sweep")
    if isinstance(sweep, dict):
        parts.append(f"sweep_param={sweep.get('param')} sweep_points={_sweep_points(sweep)}")
    if payload.get("grid_n"):
        parts.append(f"grid_n={payload['grid_n']}")
    return " ".join(parts) or "empty"


def _sweep_points(sweep: dict[str, Any]) -> Any:
    values = sweep.get("values")
    return len(values) if isinstance(values, list) else sweep.get("n")
