"""
Utility modules for vqseg.
"""

from .environment_validator import EnvironmentValidator, ValidationError, validate_or_exit

__all__ = [
    'EnvironmentValidator',
    'ValidationError',
    'validate_or_exit',
]
