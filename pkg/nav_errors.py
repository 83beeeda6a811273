"""
SpikeNav Errors - Exception hierarchy
Every failure the toolkit can report, each tagged with the CLI exit code it maps to
"""
from typing import Optional


class SpikeNavError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class InvalidInputError(SpikeNavError):
    """Bad argument values: dt <= 0, unsorted timestamps, shape mismatch, out-of-range times"""
    exit_code = 2


class ConfigError(InvalidInputError):
    """Config file or environment override failed validation"""


class DataFormatError(SpikeNavError):
    """Malformed input file (wrong field count, unparsable number)"""
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(f"{location}{message}")


class StructuralError(SpikeNavError):
    """Missing files, count mismatches between related files, absent sequences"""
    exit_code = 3


class NumericFailureError(SpikeNavError):
    """Non-finite loss or state"""
    exit_code = 4

    def __init__(self, message: str, **diagnostics):
        self.diagnostics = diagnostics
        if diagnostics:
            details = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
            message = f"{message} ({details})"
        super().__init__(message)


class CheckpointFormatError(SpikeNavError):
    """Checkpoint tag, layout or embedded config does not match what was requested"""
    exit_code = 2
