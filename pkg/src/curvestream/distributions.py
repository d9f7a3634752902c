"""Inverse-chi-squared and inverse G-Wishart containers and their moments.

Only the two moment formulas the coordinate-ascent updates consume are
provided; density evaluation and sampling are out of scope.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cholesky

from .exceptions import NonPositiveDefiniteError


class Graph(Enum):
    FULL = "full"
    DIAG = "diag"


@dataclass(frozen=True)
class InverseChiSq:
    """Scalar inverse-chi-squared with shape xi > 0 and scale lam > 0."""

    xi: float
    lam: float

    def __post_init__(self):
        if not (self.xi > 0 and self.lam > 0):
            raise ValueError(f"xi and lam must be positive, got ({self.xi}, {self.lam})")


@dataclass(frozen=True)
class InverseGWishart:
    """Matrix inverse G-Wishart with a full or diagonal precision graph."""

    graph: Graph
    xi: float
    Lambda: np.ndarray = field(repr=False)

    def __post_init__(self):
        Lam = np.asarray(self.Lambda, dtype=float)
        object.__setattr__(self, "Lambda", Lam)
        if Lam.ndim != 2 or Lam.shape[0] != Lam.shape[1] or Lam.shape[0] < 1:
            raise ValueError(f"Lambda must be square, got shape {Lam.shape}")
        _require_spd(Lam)
        if self.graph is Graph.DIAG:
            off = Lam - np.diag(np.diagonal(Lam))
            if np.any(off != 0.0):
                raise ValueError("diagonal-graph Lambda must be diagonal")

    @property
    def dim(self) -> int:
        return self.Lambda.shape[0]


def _require_spd(M):
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, M.T, rtol=0.0, atol=1e-10 * max(1.0, np.abs(M).max())):
        raise NonPositiveDefiniteError("matrix is not symmetric")
    try:
        cholesky(M, lower=False)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteError("matrix is not positive definite") from None
    except Exception as err:  # scipy raises LinAlgError from its own module
        if type(err).__name__ == "LinAlgError":
            raise NonPositiveDefiniteError("matrix is not positive definite") from None
        raise


def inv_chisq_reciprocal_moment(d: InverseChiSq) -> float:
    """E[1/x] = xi / lam."""
    return d.xi / d.lam


def igw_inverse_moment(d: InverseGWishart) -> np.ndarray:
    """E[X^{-1}] of an inverse G-Wishart.

    Full graph: (xi - dim + 1) * Lambda^{-1}.  Diagonal graph: each diagonal
    entry is an independent inverse-chi-squared scale, giving
    xi * Lambda^{-1} with exact zeros off the diagonal.
    """
    if d.graph is Graph.DIAG:
        return np.diag(d.xi / np.diagonal(d.Lambda))
    factor = d.xi - d.dim + 1
    out = factor * np.linalg.inv(d.Lambda)
    return (out + out.T) / 2.0


def matrix_sqrt(M) -> np.ndarray:
    """Upper-triangular S with S^T S = M, for symmetric positive definite M."""
    _require_spd(M)
    return cholesky(np.asarray(M, dtype=float), lower=False)


def matrix_inv_sqrt(M) -> np.ndarray:
    """Upper-triangular S with S^T S = M^{-1}, for symmetric positive definite M."""
    _require_spd(M)
    Minv = np.linalg.inv(np.asarray(M, dtype=float))
    return cholesky((Minv + Minv.T) / 2.0, lower=False)
