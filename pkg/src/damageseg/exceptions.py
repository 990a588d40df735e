"""Exception hierarchy shared across the pipeline.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
DataError -> 3, anything else -> 4.
"""


class DamagesegError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(DamagesegError):
    """Invalid configuration: unknown keys, bad registry names, bad presets."""


class DataError(DamagesegError):
    """Invalid data: broken manifests, missing files, malformed annotations."""
