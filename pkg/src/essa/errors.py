"""Exception hierarchy shared by every stage.

The CLI maps these onto process exit codes (see ``essa.cli``).
"""


class EssaError(Exception):
    """Base class for all package errors."""


class ShapeError(EssaError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(EssaError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class ContractError(EssaError):
    """A caller violated a pre-condition (missing gradient, bad mode, ...)."""


class ConfigError(EssaError, ValueError):
    """Invalid model, adapter or stage configuration."""


class DataError(EssaError):
    """Dataset content does not satisfy the consumer's requirements."""


class FormatError(DataError):
    """A binary file (dataset or checkpoint) is malformed."""
