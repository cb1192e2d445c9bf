"""Exception hierarchy shared across the toolkit.

Two families matter for scripting: ``ValidationError`` (bad inputs: files,
configuration, frames, arity) maps to CLI exit code 1, ``NumericalError``
(well-formed inputs on which the requested computation fails) maps to exit
code 2.
"""


class CalibrationError(Exception):
    """Base class for every error raised by calibkit."""

    exit_code = 1


class ValidationError(CalibrationError):
    exit_code = 1


class NumericalError(CalibrationError):
    exit_code = 2


# --- input / validation errors (exit code 1) -------------------------------

class FrameMismatchError(ValidationError):
    """Frames of transforms/clouds do not chain or do not match."""


class NotARotationError(ValidationError):
    """Matrix is not orthonormal with determinant +1 within tolerance."""


class NonFiniteValueError(ValidationError):
    """NaN or infinity where a finite number is required."""


class EmptyInputError(ValidationError):
    pass


class InsufficientPointsError(ValidationError):
    pass


class InconsistentFramesError(ValidationError):
    """Items of a collection disagree on their coordinate frames."""


class WrongArityError(ValidationError):
    """A delimited row has the wrong number of fields."""


class MalformedFileError(ValidationError):
    """Unparseable file content; message carries path and location."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:" if line is None else f"{path}:{line}:"
        super().__init__(f"{loc} {message}".strip())
        self.path = path
        self.line = line


class UnsupportedEncodingError(ValidationError):
    """File encoding the toolkit deliberately does not read (binary PCD)."""


class MissingFieldError(ValidationError):
    pass


class ConfigError(ValidationError):
    """Invalid run configuration document."""


# --- numerical / geometric failures (exit code 2) ---------------------------

class DegenerateGeometryError(NumericalError):
    """Point geometry leaves the requested quantity unobservable."""


class DegenerateConfigurationError(NumericalError):
    """Rank-deficient estimation problem (e.g. collinear PnP points)."""


class NoCorrespondencesError(NumericalError):
    pass


class NoConsensusError(NumericalError):
    """RANSAC found no model meeting the inlier requirement."""


class NoConvergenceError(NumericalError):
    pass


class ParallelLinesError(NumericalError):
    """Two lines are (anti)parallel; their corner is undefined."""


class TooSparseError(NumericalError):
    """Not enough returns on a board edge to attempt a fit."""


class BoardRejectedError(NumericalError):
    """Extracted board failed the edge-length sanity check."""


class BehindCameraError(NumericalError):
    """Point or board is behind the camera (non-positive depth)."""
