"""Exception hierarchy shared by every subpackage."""

from __future__ import annotations


class SncpdError(Exception):
    """Base class; ``category`` is the machine-readable tag the CLI prints."""

    category = "error"


class DimensionError(SncpdError, ValueError):
    category = "dimension"


class ContractError(SncpdError, ValueError):
    category = "contract"


class ConvergenceError(SncpdError, RuntimeError):
    category = "convergence"

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class DecompositionError(SncpdError, ValueError):
    category = "decomposition"


class ConfigError(SncpdError, ValueError):
    category = "usage"


class ParseError(SncpdError, ValueError):
    category = "parse"

    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")
        self.line = line


class ValidationError(SncpdError, ValueError):
    category = "validation"


class TrainingError(SncpdError, RuntimeError):
    category = "training"
