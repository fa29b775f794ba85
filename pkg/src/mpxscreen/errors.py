"""Exception types shared across the screening package."""

from __future__ import annotations


class ScreeningError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ScreeningError, ValueError):
    """Raised when an operation receives structurally invalid input."""


class IngestError(ScreeningError):
    """Manifest ingest failed; ``offenders`` lists the violating record ids."""

    def __init__(self, message: str, offenders: list[str] | None = None):
        super().__init__(message)
        self.offenders = offenders or []


class InvalidTransformError(ScreeningError, ValueError):
    """Transform parameters fall outside their declared bounds."""


class BalanceError(ScreeningError):
    """Class balancing cannot proceed (e.g. empty minority class)."""


class SplitError(ScreeningError):
    """Validation/test split cannot proceed (e.g. empty pool)."""


class BackendLoadError(ScreeningError):
    """Segmentation or restoration backend weights missing or corrupt."""


class ModelArtifactError(ScreeningError):
    """Classifier model artifact missing, corrupt, or inconsistent."""


class TrainingError(ScreeningError):
    """Training preconditions violated or training diverged."""


class EvaluationError(ScreeningError):
    """Evaluation harness misuse (e.g. empty manifest)."""


class UploadTooLargeError(ScreeningError):
    """Upload payload exceeds the configured byte budget (maps to HTTP 413)."""


class UnsupportedMediaError(ScreeningError):
    """Upload payload is not a decodable PNG/JPEG image (maps to HTTP 415)."""
