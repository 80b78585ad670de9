"""
Exception hierarchy shared by the library and the command line.

Each error carries the process exit code the CLI reports for it.
"""


class DecorNetError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(DecorNetError, ValueError):
    """Invalid configuration, override or command-line argument."""

    exit_code = 2


class CheckpointError(ConfigError):
    """Unreadable or malformed checkpoint archive."""


class DataError(DecorNetError):
    """Problems with volumes, masks, manifests or splits.

    ``code`` distinguishes the failure kind, e.g. ``unreadable``,
    ``missing_mask`` or ``shape_mismatch``.
    """

    exit_code = 3

    def __init__(self, code, message):
        super().__init__(f"[{code}] {message}")
        self.code = code


class NumericalError(DecorNetError, ArithmeticError):
    """Non-finite values in features or losses."""

    exit_code = 4


class ShapeMismatchError(DecorNetError, ValueError):
    """Tensor shapes that do not fit together."""

    exit_code = 2
