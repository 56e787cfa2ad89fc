"""Error taxonomy shared across the package.

The CLI maps these to distinct exit codes: ConfigError -> 2, DataError -> 3,
DivergenceError -> 4.
"""


class TokenrecError(Exception):
    pass


class ConfigError(TokenrecError):
    """Invalid or inconsistent configuration."""


class DataError(TokenrecError):
    """Malformed or inconsistent input data."""


class DivergenceError(TokenrecError):
    """Training produced non-finite values."""
