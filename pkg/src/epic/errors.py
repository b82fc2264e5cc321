"""Exception hierarchy. The CLI maps these onto exit codes."""


class EpicError(Exception):
    exit_code = 1


class InputFormatError(EpicError, ValueError):
    """Malformed or inconsistent input files / arrays."""

    exit_code = 3


class PipelineError(EpicError, RuntimeError):
    """A pipeline invariant could not be satisfied."""

    exit_code = 4


class EmptyCloudError(PipelineError):
    """Every point of a cloud was excluded."""


class ShapeError(InputFormatError):
    """Array dimensions disagree."""
