"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value violates its invariants or a config file is malformed."""


class DataError(ValueError):
    """A dataset root, image file, or batch request is unusable."""


class NumericsError(RuntimeError):
    """Training or evaluation produced non-finite values."""


class DegenerateFeaturesError(ValueError):
    """Feature matrix carries no signal (e.g. constant rows), so the analysis is undefined."""
