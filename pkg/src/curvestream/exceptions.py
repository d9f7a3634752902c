"""Exception types shared across the package."""


class CurvestreamError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(CurvestreamError):
    """Block shapes are inconsistent with the declared problem layout."""


class RankDeficientError(CurvestreamError):
    """A triangular factor has a (near-)zero diagonal entry.

    Carries the provenance of the offending factorization so callers can
    report which group produced a degenerate block.
    """

    def __init__(self, message, group=None, subgroup=None):
        super().__init__(message)
        self.group = group
        self.subgroup = subgroup


class SingularMatrixError(CurvestreamError):
    """A dense normal-equations matrix is numerically singular."""


class NonPositiveDefiniteError(CurvestreamError):
    """A matrix required to be symmetric positive definite is not."""


class OutOfRangeError(CurvestreamError):
    """An evaluation point lies outside the spline boundary interval."""


class TooFewDistinctValuesError(CurvestreamError):
    """Not enough distinct predictor values to place the requested knots."""


class UnknownGroupError(CurvestreamError):
    """A group or subgroup label is not present in the fit."""


class SingleCategoryError(CurvestreamError):
    """Contrast data contains only one category; the contrast is unidentifiable."""


class NonFiniteUpdateError(CurvestreamError):
    """A coordinate-ascent update produced a NaN or infinity."""

    def __init__(self, quantity, iteration=None):
        msg = f"non-finite value in update of {quantity!r}"
        if iteration is not None:
            msg += f" at iteration {iteration}"
        super().__init__(msg)
        self.quantity = quantity
        self.iteration = iteration


class DimensionCapExceededError(CurvestreamError):
    """The dense (naive) path would allocate beyond the configured cap."""


class GridMismatchError(CurvestreamError):
    """Two gridded densities do not share the same abscissae."""


class NotNormalizedError(CurvestreamError):
    """A gridded density does not integrate to one within tolerance."""


class ArtifactFormatError(CurvestreamError):
    """A fit artifact file is malformed or has an unsupported major version."""
