"""Exception types raised across the package.

Every error carries enough context (row index, token position, parameter
name) to locate the offending input without a debugger.
"""


class FedQosError(Exception):
    """Base class for all fedqos errors."""


class DataFormatError(FedQosError, ValueError):
    """Structurally malformed input file (e.g. ragged rows)."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(message if row is None else f"{message} (row {row})")


class TokenParseError(FedQosError, ValueError):
    """A token that should be numeric is not."""

    def __init__(self, message: str, row: int, col: int):
        self.row = row
        self.col = col
        super().__init__(f"{message} (row {row}, column {col})")


class EmptyInputError(FedQosError, ValueError):
    """Input file or collection contained nothing usable."""


class ShapeError(FedQosError, ValueError):
    """Array dimensions do not match the operation's contract."""


class EmptyNeighborhoodError(FedQosError, ValueError):
    """Attention was asked to score an empty candidate set."""


class ContractViolation(FedQosError, ValueError):
    """A numeric precondition (e.g. weights summing to one) was broken."""


class UndefinedMetricError(FedQosError, ValueError):
    """Metric or loss requested over an empty prediction set."""


class NumericOverflowError(FedQosError, FloatingPointError):
    """A tensor went non-finite; names the offending parameter."""

    def __init__(self, tensor_name: str, context: str = ""):
        self.tensor_name = tensor_name
        detail = f"non-finite values in '{tensor_name}'"
        if context:
            detail += f" ({context})"
        super().__init__(detail)


class ConfigError(FedQosError, ValueError):
    """Invalid or inconsistent experiment configuration."""


class DegenerateInputError(FedQosError, ValueError):
    """Operation needs more structure than the input provides."""
