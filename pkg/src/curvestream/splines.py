"""Low-rank cubic spline bases with an integrated-squared-curvature penalty.

The basis columns are linear transforms of clamped cubic B-splines chosen so
that a ridge penalty on the coefficients equals the exact second-derivative
roughness penalty.  In mixed-model form, i.i.d. normal coefficients on these
columns give the classical smoothing-spline shrinkage.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.interpolate import BSpline

from .exceptions import OutOfRangeError, TooFewDistinctValuesError

# Relative slack added to the data range so boundary points evaluate cleanly.
BOUNDARY_SLACK = 1e-8


@dataclass(frozen=True)
class SplineBasis:
    """Interior knots plus a boundary interval.

    The basis has K = len(interior_knots) + 2 columns.  Knots are stored as a
    tuple so the transform matrix can be cached per basis.
    """

    interior_knots: tuple
    boundary: tuple

    def __post_init__(self):
        a, b = self.boundary
        knots = self.interior_knots
        if not a < b:
            raise ValueError(f"boundary must satisfy a < b, got ({a}, {b})")
        if len(knots) < 1:
            raise ValueError("at least one interior knot is required")
        inside = all(a < k < b for k in knots)
        ascending = all(k0 < k1 for k0, k1 in zip(knots, knots[1:]))
        if not (inside and ascending):
            raise ValueError("interior knots must be strictly ascending inside (a, b)")

    @property
    def K(self) -> int:
        return len(self.interior_knots) + 2

    @property
    def knot_vector(self) -> np.ndarray:
        """Clamped cubic knot vector: boundary knots with multiplicity four."""
        a, b = self.boundary
        return np.concatenate([[a] * 4, self.interior_knots, [b] * 4])


def default_knots(x, n_interior: int) -> np.ndarray:
    """Interior knots at quantiles k/(n_interior + 1) of the distinct x values."""
    if n_interior < 1:
        raise ValueError("n_interior must be at least 1")
    distinct = np.unique(np.asarray(x, dtype=float))
    if distinct.size < n_interior + 2:
        raise TooFewDistinctValuesError(
            f"need at least {n_interior + 2} distinct values, got {distinct.size}"
        )
    probs = np.arange(1, n_interior + 1) / (n_interior + 1)
    knots = np.quantile(distinct, probs)
    if np.any(np.diff(knots) <= 0):
        raise TooFewDistinctValuesError(
            "distinct values too concentrated: quantile knots collide"
        )
    return knots


def basis_from_data(x, n_columns: int) -> SplineBasis:
    """Basis with n_columns columns and a slightly padded data range."""
    if n_columns < 3:
        raise ValueError("n_columns must be at least 3")
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    span = hi - lo if hi > lo else max(abs(hi), 1.0)
    pad = BOUNDARY_SLACK * span
    knots = default_knots(x, n_columns - 2)
    return SplineBasis(interior_knots=tuple(float(k) for k in knots),
                       boundary=(lo - pad, hi + pad))


def bspline_design(x, basis: SplineBasis, derivative: int = 0) -> np.ndarray:
    """Dense design matrix of the raw clamped cubic B-splines (or a derivative)."""
    x = np.asarray(x, dtype=float)
    a, b = basis.boundary
    if x.size and (x.min() < a or x.max() > b):
        raise OutOfRangeError(
            f"evaluation points outside spline boundary [{a}, {b}]"
        )
    t = basis.knot_vector
    nb = len(t) - 4
    if derivative == 0:
        return BSpline.design_matrix(x, t, 3, extrapolate=False).toarray()
    cols = np.empty((x.size, nb))
    for j in range(nb):
        coef = np.zeros(nb)
        coef[j] = 1.0
        cols[:, j] = BSpline(t, coef, 3, extrapolate=False).derivative(derivative)(x)
    return cols


def curvature_penalty(basis: SplineBasis) -> np.ndarray:
    """Exact Gram matrix of second derivatives of the raw B-splines.

    Second derivatives of cubics are piecewise linear, so their products are
    piecewise quadratic; three-node Gauss-Legendre per inter-knot interval
    integrates them exactly.
    """
    a, b = basis.boundary
    breaks = np.concatenate([[a], basis.interior_knots, [b]])
    nodes, weights = np.polynomial.legendre.leggauss(3)
    nb = len(basis.knot_vector) - 4
    Omega = np.zeros((nb, nb))
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        half = (hi - lo) / 2.0
        xs = (lo + hi) / 2.0 + half * nodes
        D2 = bspline_design(xs, basis, derivative=2)
        Omega += half * (D2 * weights[:, None]).T @ D2
    return (Omega + Omega.T) / 2.0


@lru_cache(maxsize=64)
def _mixed_model_transform(basis: SplineBasis) -> np.ndarray:
    """Right transform turning raw B-splines into penalty-whitened columns.

    The curvature penalty has a two-dimensional null space (linear functions);
    the transform keeps the strictly positive eigenspace and rescales it so
    the penalty becomes the identity on the retained coefficients.
    """
    Omega = curvature_penalty(basis)
    eigvals, eigvecs = np.linalg.eigh(Omega)
    scale = eigvals[-1]
    null_dim = int(np.sum(eigvals < 1e-10 * scale))
    if null_dim != 2:
        raise RuntimeError(
            f"curvature penalty null space has dimension {null_dim}, expected 2"
        )
    d_pos = eigvals[2:]
    U_pos = eigvecs[:, 2:]
    return U_pos / np.sqrt(d_pos)


def osullivan_basis(x, basis: SplineBasis) -> np.ndarray:
    """Evaluate the K penalized-spline basis columns at x.

    Rows depend only on the x value.  With design [1, x, Z] and an i.i.d.
    normal prior on the Z coefficients, the implied fit penalizes the
    integrated squared second derivative of the regression function.
    """
    B = bspline_design(x, basis)
    return B @ _mixed_model_transform(basis)
