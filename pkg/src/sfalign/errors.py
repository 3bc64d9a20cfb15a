"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
NumericError -> 3, DataError -> 4.
"""


class ConfigError(Exception):
    """Invalid or unknown configuration."""


class NumericError(Exception):
    """A computation produced NaN/Inf where finite values are required."""


class DataError(Exception):
    """Dataset, checkpoint or other file-level I/O problem."""
