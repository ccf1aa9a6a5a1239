"""Exception types shared across the package."""

from __future__ import annotations


class JumpGamesError(Exception):
    """Base class for all package errors."""


class InvalidArgument(JumpGamesError, ValueError):
    pass


class InvalidState(JumpGamesError, RuntimeError):
    pass


class UnsupportedMeasure(JumpGamesError, NotImplementedError):
    pass


class OutOfDomain(JumpGamesError, ValueError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class NoConvergence(JumpGamesError, RuntimeError):
    def __init__(self, message: str, residual: float | None = None, iterations: int | None = None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateMetric(JumpGamesError, ZeroDivisionError):
    pass


class NumericFault(JumpGamesError, FloatingPointError):
    """Non-finite value produced during simulation or training.

    ``context`` carries whatever locating information the raiser had
    (path, step, iteration, agent).
    """

    def __init__(self, message: str, **context):
        self.context = dict(context)
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)
