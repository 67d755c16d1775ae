"""Exception hierarchy shared by every stage of the pipeline."""

from __future__ import annotations


class PulseMapError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PulseMapError, ValueError):
    """Input violates a documented precondition (CLI exit code 3)."""


# signal processing
class NonPositiveBaseline(ValidationError):
    pass


class InvalidBand(ValidationError):
    pass


class TooShort(ValidationError):
    pass


class DegenerateReference(ValidationError):
    pass


class SignalTooShort(TooShort):
    pass


class ZeroVariance(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class NoSpectralPeak(ValidationError):
    pass


class SpanMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class Infeasible(ValidationError):
    pass


class ZeroSignal(ValidationError):
    pass


# geometry
class MissingUVs(ValidationError):
    pass


class LandmarkOffSurface(PulseMapError):
    """A landmark does not land on the rendered surface (non-fatal per landmark)."""


# model fitting
class DimensionMismatch(ValidationError):
    pass


class DegenerateConfiguration(ValidationError):
    pass


class NonFiniteObjective(PulseMapError, FloatingPointError):
    pass


class NoCorrespondences(ValidationError):
    pass


# synthesis / evaluation
class InvalidScenario(ValidationError):
    pass


class ConstantInput(ValidationError):
    pass


class NoValidPixels(ValidationError):
    pass


class SemanticMismatch(ValidationError):
    pass


class InputError(PulseMapError, OSError):
    """A required input is missing, unreadable or corrupt (CLI exit code 2)."""

    def __init__(self, message: str, path: str | None = None):
        super().__init__(message)
        self.path = path

    def __str__(self) -> str:
        return self.args[0]
