"""Exception hierarchy.

Three families map to the CLI exit codes: configuration problems (1),
data problems (2) and numeric aborts (3).
"""

from __future__ import annotations


class FamhError(Exception):
    exit_code = 2


class ConfigError(FamhError, ValueError):
    exit_code = 1


class DataError(FamhError, ValueError):
    exit_code = 2


class NumericError(FamhError, ArithmeticError):
    exit_code = 3


# ingest
class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotoneTime(ParseError):
    pass


class EmptyFile(DataError):
    pass


class BadMagic(DataError):
    pass


class TruncatedFile(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class SegmentTooShort(DataError):
    def __init__(self, required: int, available: int):
        self.required = required
        self.available = available
        super().__init__(f"segment too short: need {required} samples, have {available}")


class NoUsableSegment(DataError):
    pass


class IndivisibleLength(DataError):
    pass


class CoverageError(DataError):
    pass


class InvalidConfig(ConfigError):
    pass


class MissingRecording(DataError):
    pass


class BadOffset(DataError):
    pass


# preprocess
class RateTooLow(DataError):
    pass


class TooShort(DataError):
    pass


class CalibrationFailed(DataError):
    INSUFFICIENT_COVERAGE = "InsufficientCoverage"
    NO_CONVERGENCE = "NoConvergence"
    GAIN_OUT_OF_RANGE = "GainOutOfRange"

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"calibration failed ({reason}){': ' + detail if detail else ''}")


# spectral / model
class BadLength(ConfigError):
    pass


class TooFewFrames(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class AllZeroWeights(ConfigError):
    pass


class EmptyMask(DataError):
    pass


class OddDim(ConfigError):
    pass


# training
class NonScalarOutput(NumericError):
    pass


class NaNGradient(NumericError):
    pass


class AllLabelsMissing(DataError):
    pass


class NoLabels(DataError):
    pass


class VersionMismatch(DataError):
    pass


# metrics
class LengthMismatch(DataError):
    pass


class EmptyMatrix(DataError):
    pass


class DegenerateMarginals(NumericError):
    pass
