"""Exception hierarchy.

Every error raised by the library derives from :class:`CalibrationError` so
callers (and the CLI) can catch one base class. Subclasses carry a ``stage``
tag used by the pipeline driver to pick an exit code.
"""


class CalibrationError(Exception):
    stage = "core"


class NonPositiveDepth(CalibrationError, ValueError):
    pass


class DegenerateGeometry(CalibrationError, ValueError):
    pass


class ZeroVector(CalibrationError, ValueError):
    pass


class SkeletonMismatch(CalibrationError, ValueError):
    stage = "input"


class OutOfRange(CalibrationError, IndexError):
    pass


class EmptyInput(CalibrationError, ValueError):
    pass


class NoValidData(CalibrationError, ValueError):
    stage = "registration"


class InsufficientOverlap(CalibrationError, ValueError):
    stage = "registration"


class PreconditionError(CalibrationError, ValueError):
    pass


class RankDeficient(CalibrationError, ValueError):
    stage = "registration"


class CheiralityAmbiguous(CalibrationError, ValueError):
    stage = "registration"


class DisconnectedGraph(CalibrationError, ValueError):
    stage = "integration"


class InsufficientObservations(CalibrationError, ValueError):
    stage = "bundle"


class CountMismatch(CalibrationError, ValueError):
    stage = "eval"


class DegenerateBaseline(CalibrationError, ValueError):
    stage = "eval"


class NoGroundTruth(CalibrationError, ValueError):
    stage = "eval"


class InvalidSpec(CalibrationError, ValueError):
    stage = "synth"


class ParseError(CalibrationError, ValueError):
    stage = "input"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(CalibrationError, ValueError):
    stage = "input"


class ConfigError(CalibrationError, ValueError):
    stage = "config"
