""" Defines the structure of all error types"""

from enum import Enum


class ErrorTypes(str, Enum):
    """List of all possible error types"""
    CONFIGURATION = "configuration"
    SHAPE = "shape"
    DATA = "data"
    STATE = "state"
    NUMERIC = "numeric"
    INTEGRITY = "integrity"
    UNSUPPORTED = "unsupported"


class FextError(Exception):
    """Toolkit exception with an error type."""
    def __init__(self, message: str, error_type: ErrorTypes):
        self.message = message
        self.error_type = ErrorTypes(error_type)
        super().__init__(f"{self.error_type.value}: {message}")
