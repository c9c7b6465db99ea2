"""
Exception hierarchy for the forecasting workbench.

Lower layers raise these; the experiment runner catches them per cell and the
CLI maps them to exit codes.
"""

from typing import Optional


class WorkbenchError(Exception):
    """Base class for every error raised by the workbench."""


class DimensionError(WorkbenchError, ValueError):
    """Tensor or matrix shapes do not agree."""


class ConfigurationError(WorkbenchError):
    """An experiment, model or dataset configuration is invalid."""


class ContractError(WorkbenchError):
    """A caller violated an operation's precondition."""


class NumericError(WorkbenchError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParseError(WorkbenchError):
    """Input file could not be ingested."""


class LeakageError(WorkbenchError):
    """A retrieved segment overlaps or postdates the query it serves."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, batch_index: int, loss: Optional[float] = None):
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss
        super().__init__(
            f"Training diverged at epoch {epoch}, batch {batch_index} (loss={loss})"
        )
