class ConfigError(ValueError):
    """Invalid configuration; the message names the file/field and the violated constraint."""


class CapacityError(RuntimeError):
    """Stage storage does not fit and recomputation is disabled."""
