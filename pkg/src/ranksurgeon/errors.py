"""Error taxonomy shared by the library and the CLI exit-code mapping."""


class ToolError(Exception):
    """Base class for failures the CLI converts into exit codes."""

    exit_code = 1


class ConfigError(ToolError):
    """Invalid or inconsistent run configuration."""

    exit_code = 2


class DataError(ToolError):
    """Malformed or missing input data (files, bundles, tasks)."""

    exit_code = 3


class NumericalError(ToolError):
    """Numerical failure: non-finite input or a non-converging solver."""

    exit_code = 4
