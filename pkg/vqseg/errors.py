"""
Error types for vqseg.
Every failure the library raises on purpose derives from VQSegError.
"""


class VQSegError(Exception):
    """Base class for all vqseg errors."""
    pass


class ConfigurationError(VQSegError):
    """Raised when shapes, hyper-parameters or config files are inconsistent."""
    pass


class NumericalError(VQSegError):
    """Raised when a value that must be finite is not."""
    pass


class DataError(VQSegError):
    """Raised for malformed datasets, labels or metric inputs."""
    pass


class InternalInvariantError(VQSegError):
    """Raised when an internal invariant is broken; this is always a bug."""
    pass
