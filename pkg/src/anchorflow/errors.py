"""Exception hierarchy.  CLI exit codes are attached to each class."""
from __future__ import annotations


class AnchorflowError(Exception):
    exit_code = 1


class DimensionError(AnchorflowError, ValueError):
    pass


class ConfigError(AnchorflowError, ValueError):
    exit_code = 2


class DivergenceError(AnchorflowError, ArithmeticError):
    """Non-finite value during an optimization loop."""

    exit_code = 3

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class MissingArtifactError(AnchorflowError, FileNotFoundError):
    exit_code = 4
