class ConfigError(ValueError):
    """Invalid configuration value, key, or layer specification."""


class DataError(ValueError):
    """Dataset missing, malformed, or incompatible with the request."""


class TrainingError(RuntimeError):
    """Numerical failure during optimisation (NaN/Inf loss or gradient)."""


class CheckpointError(ValueError):
    """Checkpoint file unreadable or incompatible with the model."""
