"""Exception hierarchy shared by the solvers, the CLI and the HTTP service."""
from __future__ import annotations

from typing import Any


class StartupOptionsError(Exception):
    """Base error carrying a machine-readable code and a process exit status."""

    code = "error"
    exit_code = 1

    def __init__(self, message: str, *, code: str | None = None, details: Any = None) -> None:
        super().__init__(message)
        if code is not None:
            self.code = code
        self.details = details

    @property
    def message(self) -> str:
        return str(self.args[0]) if self.args else ""


class ParameterError(StartupOptionsError):
    code = "invalid-params"
    exit_code = 2


class SolverError(StartupOptionsError):
    code = "solver-failure"
    exit_code = 3


class VerificationError(StartupOptionsError):
    code = "verification-failed"
    exit_code = 4
