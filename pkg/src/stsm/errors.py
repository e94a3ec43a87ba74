"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class STSMError(Exception):
    exit_code = 1


class ConfigError(STSMError, ValueError):
    """Invalid configuration: shift specs, network configs, task geometry, config files."""

    exit_code = 2


class ShapeError(STSMError, ValueError):
    exit_code = 3


class RangeError(ShapeError):
    """Channel range outside the tensor it is applied to."""


class ContractError(STSMError, ValueError):
    exit_code = 3


class FormatError(STSMError, ValueError):
    """Malformed tensor or clip file."""

    exit_code = 3
