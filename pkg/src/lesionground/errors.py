"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto its
documented status codes (2 config, 3 data, 4 numeric).
"""


class GroundingError(Exception):
    exit_code = 3


class ParameterError(GroundingError, ValueError):
    exit_code = 2


class ShapeError(GroundingError, ValueError):
    pass


class EmptyRegionError(GroundingError, ValueError):
    pass


class ReportError(GroundingError, ValueError):
    """Structured report parsing failure, located by line and column."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "") + ": "
        super().__init__(where + message)


class ReportSyntaxError(ReportError):
    pass


class DuplicateLesionError(ReportError):
    pass


class UnknownOrganError(ReportError):
    pass


class NoCandidateError(GroundingError):
    pass


class SequencingError(GroundingError):
    pass


class UndefinedMetricError(GroundingError, ValueError):
    pass


class SpecError(GroundingError, ValueError):
    pass


class NumericError(GroundingError, ArithmeticError):
    exit_code = 4


class StageError(GroundingError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"[{stage}] {cause}")
