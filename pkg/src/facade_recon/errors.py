class ConfigError(ValueError):
    """Invalid configuration, shape or geometry."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""
