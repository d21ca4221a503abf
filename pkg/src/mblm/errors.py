"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI uses when it escapes a command.
"""


class MblmError(Exception):
    exit_code = 1


class ConfigError(MblmError, ValueError):
    """Invalid hyperparameters, structure variants or missing run inputs."""

    exit_code = 2


class DataError(MblmError, ValueError):
    """Malformed examples: token ids out of range, bad labels, empty splits."""

    exit_code = 3


class ContractError(MblmError, ValueError):
    """A caller broke an operation precondition (shapes, scalar loss, modes)."""

    exit_code = 4


class ShapeError(ContractError):
    pass
