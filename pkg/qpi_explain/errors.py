"""Exception hierarchy for qpi-explain.

Every error carries an optional ``hint`` telling the caller what to do next.
The CLI turns them into ``{"error": ..., "hint": ...}`` payloads. Only two
failure exit codes exist: 2 for a bad configuration or call parameter
(``ConfigError``, ``DomainError``, ``CapabilityError``) and 3 for everything
that goes wrong with the data or the computation, which is the default.
"""

from typing import Any, Dict, List, Optional


class QpiError(Exception):
    """Base exception for all qpi-explain errors."""

    exit_code = 3

    def __init__(self, message: str, hint: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.hint = hint

    def to_dict(self) -> Dict[str, Any]:
        payload = {"error": self.message}
        if self.hint:
            payload["hint"] = self.hint
        return payload


class ConfigError(QpiError):
    """Raised when a configuration value or call parameter is invalid."""

    exit_code = 2


class DataError(QpiError):
    """Raised when input data is missing, malformed or inconsistent."""

    exit_code = 3


class MissingArtifactError(DataError):
    """Raised when an upstream artifact has not been produced yet."""

    def __init__(self, path: str, producer: str):
        super().__init__(
            f"missing artifact: {path}",
            hint=f"Run 'qpi-explain {producer}' first to produce it.",
        )
        self.path = path
        self.producer = producer


class DimensionError(QpiError):
    """Raised when a tensor does not have the shape a layer expects."""

    def __init__(self, layer: str, expected: Any, got: Any):
        super().__init__(
            f"shape mismatch at layer '{layer}': expected {expected}, got {tuple(got)}",
            hint="Check the model's declared input shape and resize patches with models.prepare().",
        )
        self.layer = layer
        self.expected = expected
        self.got = tuple(got)


class StateError(QpiError):
    """Raised when an operation is called out of order (e.g. backward without forward)."""


class OptimizerError(QpiError):
    """Raised when an optimizer step is aborted."""

    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        super().__init__(message, hint="Lower the learning rate or inspect the listed parameters.")
        self.diagnostics = diagnostics or []

    def to_dict(self) -> Dict[str, Any]:
        payload = super().to_dict()
        payload["diagnostics"] = self.diagnostics
        return payload


class DomainError(QpiError):
    """Raised when a numeric argument is outside its mathematical domain."""

    exit_code = 2


class FitError(QpiError):
    """Raised when a parameter fit cannot produce a finite optimum."""


class CalibrationError(QpiError):
    """Raised when a calibration statistic is undefined (e.g. no samples)."""


class CapabilityError(QpiError):
    """Raised when a model cannot support the requested explanation method."""

    exit_code = 2


class DegenerateContourError(DataError):
    """Raised when a contour has zero perimeter or too few points."""
