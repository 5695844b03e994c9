"""Exception types shared across the package."""


class ChainmeldError(Exception):
    """Base class for all package errors."""


class StructureError(ChainmeldError):
    """Chain wiring or dimension mismatch."""


class ModelInconsistencyError(ChainmeldError):
    """A submodel joint has mass where its own prior marginal has none."""


class PoolingConfigError(ChainmeldError):
    """Pooled prior is missing a required evaluator or has invalid weights."""


class UnsupportedConfigError(ChainmeldError):
    """Requested operation is outside the supported configuration space."""


class NumericalFailureError(ChainmeldError):
    """A numerical procedure produced non-finite or unusable results."""


class InitializationError(ChainmeldError):
    """Could not find a finite-density initial state for a sampler."""


class ConfigError(ChainmeldError):
    """Run configuration failed validation; message carries the key path."""
