"""Exception types shared across the package."""


class C2PRegError(Exception):
    """Base class for all errors raised by this package."""


class EmptyCloud(C2PRegError):
    """An operation received a point set with no points."""


class InvalidTransform(C2PRegError):
    """A rotation matrix is not orthonormal with determinant +1."""


class DegenerateCorrespondences(C2PRegError):
    """Too few or rank-deficient correspondences for rigid estimation."""


class InvalidConfig(C2PRegError):
    """A configuration value violates its documented constraints."""


class EmptyResult(C2PRegError):
    """Partial sampling removed every point of the cloud."""


class InsufficientDensity(C2PRegError):
    """A descriptor radius captures too few neighbors on this cloud."""


class NoCorrespondences(C2PRegError):
    """Descriptor matching accepted zero pairs."""


class RegistrationFailed(C2PRegError):
    """A registration stage could not produce a usable result."""


class NumericalError(C2PRegError):
    """Non-finite values appeared during optimization."""


class ShapeMismatch(C2PRegError):
    """Two per-point quantities disagree in length."""


class EmptyLandmarks(C2PRegError):
    """No landmark of the source has a same-structure landmark in the target."""


class CloudFormatError(C2PRegError):
    """A cloud, field, or correspondence file could not be parsed."""


class BenchmarkAborted(C2PRegError):
    """Too many per-sample failures for a trustworthy benchmark report."""
