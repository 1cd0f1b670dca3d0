"""
Exception hierarchy shared by every module.

Each error carries the process exit code the CLI reports for it:
0 success, 2 I/O, 3 split consistency, 4 data, 5 numeric failure,
6 digest mismatch.
"""
from typing import Optional


class HybridRoiError(Exception):
    """Base class for all expected failures"""
    exit_code: int = 1


class StorageError(HybridRoiError):
    """Unreadable or unwritable path"""
    exit_code = 2


class CheckpointIntegrityError(StorageError):
    """Checkpoint bytes do not match their recorded checksums"""


class SplitConsistencyError(HybridRoiError):
    """Split cannot be built or violates the patient-level contract"""
    exit_code = 3


class SplitFileError(SplitConsistencyError):
    """Malformed split file"""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(HybridRoiError):
    """Bad manifest, image or dataset content"""
    exit_code = 4


class ManifestConsistencyError(DataError):
    """Same identifier mapped to conflicting labels"""


class SampleError(DataError):
    """A single sample could not be decoded"""


class DimensionError(DataError, ValueError):
    """Array shapes are incompatible with an operation or config"""


class ContractError(HybridRoiError, ValueError):
    """A documented precondition was violated"""
    exit_code = 4


class UndefinedMetricError(HybridRoiError, ValueError):
    """Metric is undefined for the given labels"""
    exit_code = 4


class NumericError(HybridRoiError):
    """Non-finite loss or parameters"""
    exit_code = 5


class DigestMismatchError(HybridRoiError):
    """Checkpoint was produced under a different config or split"""
    exit_code = 6
