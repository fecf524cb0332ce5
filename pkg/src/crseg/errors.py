"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent setup."""


class FormatError(ValueError):
    """On-disk data does not match the expected layout."""
