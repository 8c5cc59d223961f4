"""Exception hierarchy shared by all splatedit modules."""


class SplatEditError(Exception):
    """Base class for every error raised by this package."""


class InputError(SplatEditError, ValueError):
    """Arguments violate an operation's preconditions."""


class PlyFormatError(SplatEditError, ValueError):
    """A PLY file is malformed or lacks a required vertex property."""


class UnsupportedEncodingError(PlyFormatError):
    """The PLY file is ASCII or big-endian."""


class DegenerateGeometryError(SplatEditError, ValueError):
    """Geometry is too degenerate for the requested construction."""


class BehindCameraError(SplatEditError, ValueError):
    """A point projects with non-positive depth."""


class NothingToReplaceError(SplatEditError):
    """Replace mode found no foreground splats to remove."""


class ScoreLookupError(SplatEditError, KeyError):
    """An external similarity score file lacks a requested pair."""


class NumericError(SplatEditError, FloatingPointError):
    """A non-finite value reached an optimizer step."""


class PipelineError(SplatEditError, RuntimeError):
    """A pipeline stage failed; ``iteration`` is set for selection rounds."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class DivergedError(SplatEditError, FloatingPointError):
    """Fine-tuning produced a non-finite loss.

    ``scene`` holds the last scene whose loss was finite and ``log`` the
    loss records gathered up to that point.
    """

    def __init__(self, message: str, scene, log):
        super().__init__(message)
        self.scene = scene
        self.log = log


class NoForegroundError(InputError):
    """No view has any foreground to work with."""
