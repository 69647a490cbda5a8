"""Fair classification by penalising the spread of soft accuracy across demographics."""

from basefair.errors import (
    ConfigurationError,
    DegenerateGroupError,
    EmptyInputError,
    MissingGroupError,
    NumericError,
    ParseError,
)
from basefair.metrics import MetricsReport, OutputBatch, compute_report
from basefair.objective import ObjectiveConfig, total_loss

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DegenerateGroupError",
    "EmptyInputError",
    "MetricsReport",
    "MissingGroupError",
    "NumericError",
    "ObjectiveConfig",
    "OutputBatch",
    "ParseError",
    "compute_report",
    "total_loss",
]
