"""Exception hierarchy shared by every module and the CLI exit-code mapping."""


class MmdiffError(Exception):
    """Base class for all errors raised by the project."""

    exit_code = 1


class ShapeError(MmdiffError, ValueError):
    """Tensor or map extents are incompatible with the requested operation."""


class DomainError(MmdiffError, ValueError):
    """An argument lies outside the domain the operation is defined on."""


class NumericError(MmdiffError, ArithmeticError):
    """A computation produced NaN/Inf or a training run diverged."""

    exit_code = 3


class ContractError(MmdiffError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(MmdiffError, ValueError):
    """The run configuration is invalid."""


class FormatError(MmdiffError, ValueError):
    """A tensor, dataset or checkpoint file is malformed or truncated."""

    exit_code = 2


def exit_code_for(error: BaseException) -> int:
    """
    Maps an exception to the CLI exit code.

    Args:
        error: Exception raised by a subcommand.

    Returns:
        1 for usage/config problems, 2 for data/format problems and 3 for
        numeric divergence.
    """
    if isinstance(error, MmdiffError):
        return error.exit_code
    if isinstance(error, (FileNotFoundError, OSError)):
        return 2
    if isinstance(error, FloatingPointError):
        return 3
    return 1
