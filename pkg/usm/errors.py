"""
Exception hierarchy shared by every usm module.

The CLI maps these onto process exit codes, so library code raises them
instead of printing or exiting.
"""
from __future__ import annotations

from typing import Optional


class UsmError(Exception):
    """Base class for all errors raised by usm."""


class InvalidInputError(UsmError, ValueError):
    """A precondition of an operation was violated by its arguments."""


class ConfigError(InvalidInputError):
    """A configuration value is outside its documented range."""


class FormatError(UsmError):
    """A file on disk does not follow its documented format."""


class InitializationError(UsmError):
    """The optimiser state could not be initialised (e.g. degenerate ICP input)."""


class UndefinedCorrelationError(UsmError):
    """Pearson correlation requested on zero-variance data."""


class NumericalAbortError(UsmError):
    """A loss term became non-finite during optimisation."""

    def __init__(self, term: str, iteration: int, detail: Optional[str] = None) -> None:
        self.term = term
        self.iteration = iteration
        message = f"non-finite {term} at iteration {iteration}"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)
