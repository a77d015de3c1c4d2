#!/usr/bin/env python3
"""
Error Hierarchy
Every failure the simulator reports is a MoESimError carrying the CLI exit code.
"""

from typing import Optional, Tuple


class MoESimError(Exception):
    """Base class for all simulator errors."""

    exit_code: int = 1


class ValidationError(MoESimError, ValueError):
    """Invalid input: shapes, parameters, traces, flags."""

    exit_code = 2


class TraceLocationError(ValidationError):
    """Validation error pinned to one (step, layer, token) selection."""

    def __init__(self, message: str, location: Optional[Tuple[int, int, int]] = None):
        self.location = location
        if location is not None:
            t, l, n = location
            message = f"{message} at (t={t}, l={l}, n={n})"
        super().__init__(message)


class DimensionMismatch(TraceLocationError):
    pass


class DuplicateExpertInSelection(TraceLocationError):
    pass


class ExpertIdOutOfRange(TraceLocationError):
    pass


class InvalidShape(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class InvalidProfile(ValidationError):
    pass


class LayerOutOfRange(ValidationError):
    pass


class BudgetExceedsExperts(ValidationError):
    pass


class ProvidedPlacementInvalid(ValidationError):
    pass


class PlacementInvariantViolation(ValidationError):
    pass


class InvalidTau(ValidationError):
    pass


class EmpiricalTableMissingTau(ValidationError):
    pass


class TraceRequiredForSimulatedMode(ValidationError):
    pass


class InsufficientMeasurements(ValidationError):
    pass


class DegenerateFit(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class TraceExhausted(ValidationError):
    pass


class IncompatibleConfigs(ValidationError):
    pass


class TraceIoError(MoESimError, OSError):
    """Trace or artifact file could not be read or written."""

    exit_code = 3


class ParseError(TraceIoError):
    pass


class SchemaVersionMismatch(TraceIoError):
    pass
