"""Error taxonomy shared by the services; `exit_code` is what the CLI returns"""

from typing import Optional


class LynxError(Exception):
    exit_code = 2


class DimensionError(LynxError):
    """Operand shapes do not fit the operation"""


class PatternViolationError(LynxError):
    """A group holds more nonzeros than the N:M pattern allows"""

    def __init__(self, row: int, group: int, count: int, n: int):
        self.row = row
        self.group = group
        self.count = count
        super().__init__(f"row {row}, group {group}: {count} nonzeros exceed the pattern's {n}")


class FormatError(LynxError):
    """Corrupted packed metadata or an unreadable file"""


class ConfigurationError(LynxError):
    """Invalid parameters or policies"""


class UndefinedReferenceError(LynxError):
    """A reference quantity needed for normalization is all-zero"""


class NumericError(LynxError):
    exit_code = 3


class TrainingError(NumericError):
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")
