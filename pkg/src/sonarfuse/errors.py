"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: configuration and usage
problems exit 2, numeric failures exit 3, file I/O problems exit 4.
"""


class SonarfuseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SonarfuseError):
    """Bad configuration file, unknown key, or invalid CLI usage."""


class NumericError(SonarfuseError):
    """Non-finite values where finite ones are required (NaN loss, NaN metric)."""


class DataIOError(SonarfuseError):
    """Malformed or unreadable data files (images, checkpoints, manifests)."""
