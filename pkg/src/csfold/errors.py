"""Exception taxonomy shared by every module.

The CLI maps these onto its exit codes: configuration/contract/shape
problems exit 1, file problems exit 2, numerical failures exit 3.
"""


class CsfoldError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CsfoldError):
    """An invalid option, hyperparameter, or config-file field."""


class DimensionError(CsfoldError):
    """Tensor extents incompatible with the requested operation."""


class ContractError(CsfoldError):
    """A call violated an operation's precondition (not a shape issue)."""


class ImageIOError(CsfoldError):
    """A file could not be read or written; message names the path."""


class NumericalError(CsfoldError):
    """Non-finite values or a failed numerical verification."""
