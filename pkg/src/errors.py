"""Exception hierarchy shared by every chainscale module."""

from __future__ import annotations

from typing import Sequence


class ChainScaleError(Exception):
    """Base class for all errors raised by chainscale."""


class DomainError(ChainScaleError, ValueError):
    """An input lies outside the domain an operation is defined on."""


class ConfigurationError(ChainScaleError):
    pass


class TrainingError(ChainScaleError):
    pass


class NumericError(ChainScaleError, ArithmeticError):
    pass


class EmptyTraceError(ChainScaleError):
    pass


class TraceParseError(ChainScaleError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class CyclicGraphError(ChainScaleError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        path = " -> ".join(self.cycle + self.cycle[:1])
        super().__init__(f"call graph contains a cycle: {path}")


class ActionSpaceTooLargeError(ChainScaleError):
    def __init__(self, size: int, cap: int):
        self.size = size
        self.cap = cap
        super().__init__(f"action space has {size} actions, above the cap of {cap}")


class ExperimentValidationError(ChainScaleError):
    pass
