"""Exception types raised across the package.

Every error derives from :class:`Ard2Error` so callers can catch the whole
family at once. Errors that signal a bad argument also derive from
:class:`ValueError`.
"""


class Ard2Error(Exception):
    """Base class for all package errors."""


class NonConvergent(Ard2Error):
    """An iterative solver did not reach its tolerance."""


class BehindCamera(Ard2Error, ValueError):
    """A point or bearing lies behind the camera (non-positive depth)."""


class InvalidIntrinsics(Ard2Error, ValueError):
    """Camera intrinsics violate their invariants."""


class DegenerateTriangle(Ard2Error):
    """The AR and the two drones are (nearly) collinear."""


class InconsistentFrame(Ard2Error):
    """Measured triangle angles do not sum to 180 degrees within tolerance."""


class DegeneratePair(Ard2Error, ValueError):
    """Two vectors used for attitude alignment are (nearly) parallel."""


class ParallelRays(Ard2Error):
    """Two rays are parallel, so there is no unique closest point."""


class BehindObserver(Ard2Error):
    """The closest approach of two rays lies behind one of the observers."""


class SingularNormalEquations(Ard2Error):
    """The calibration Jacobian is rank deficient for the free parameter set."""


class EmptyInput(Ard2Error, ValueError):
    """An operation received no inputs."""


class MismatchedSizes(Ard2Error, ValueError):
    """Images that must share a size do not."""


class EmptyTruth(Ard2Error, ValueError):
    """The ground-truth contour has no foreground pixels."""


class ShapeMismatch(Ard2Error, ValueError):
    """An array does not have the expected shape."""


class EmptyDataset(Ard2Error, ValueError):
    """Training was requested on an empty dataset."""


class CorruptFile(Ard2Error):
    """A file has a bad header, wrong architecture or is truncated."""


class IoFailure(Ard2Error, OSError):
    """A file could not be read or written."""


class Unsatisfiable(Ard2Error):
    """Scene sampling failed to meet its constraints after all retries."""


class OutOfView(Ard2Error):
    """A required subject projects behind or outside a camera's sensor."""


class NotVisible(Ard2Error):
    """A rendered mesh covers no sample of the image."""


class ConfigError(Ard2Error, ValueError):
    """A configuration file or value failed validation."""
