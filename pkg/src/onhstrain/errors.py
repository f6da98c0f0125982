"""Exception types shared across the pipeline."""


class PhantomSpecError(ValueError):
    """Phantom parameters cannot produce a valid volume (cup/layers do not fit)."""


class CorrelationError(ValueError):
    """NCC is undefined (zero intensity variance in a block)."""


class ConfigError(ValueError):
    """Pipeline config is malformed; message carries the offending key path."""
