"""Exception taxonomy shared across the package.

Contract violations map to CLI exit code 1, file/config format problems to
exit code 2.
"""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible; the message names both shapes."""


class UnsupportedOperation(ContractError):
    """The model bundle does not support the requested operation."""


class NumericsError(RuntimeError):
    """Non-finite values appeared where finite ones are required."""


class TrainingDiverged(NumericsError):
    """The training loss became non-finite."""


class IdxFormatError(Exception):
    """Malformed IDX file; the message carries the offending byte offset."""


class ConfigError(Exception):
    """Invalid experiment configuration file or flag combination."""
