"""Algebra of nonnegative allowable matrices and their row-uniformity margins.

A matrix is *allowable* when every column carries at least one positive
entry; the set of such matrices is closed under products and acts on the
nonnegative cone without collapsing it to zero.  Norms here are column-sum
norms induced by the l1 norm on vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "REL_TOL",
    "MAX_DIM",
    "ConeMatrix",
    "ConePoint",
    "norms",
    "s_delta_margin",
    "cone_margin",
    "compose",
]

# Relative tolerance used for every inequality check in this package; scaled
# by the larger side of the inequality.  Entries are capped to desk scale
# (d <= 64, magnitudes ~1e+-12) so column sums stay well conditioned.
REL_TOL = 1e-12

MAX_DIM = 64


def _validated_square(entries) -> np.ndarray:
    a = np.ascontiguousarray(entries, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    d = a.shape[0]
    if not 2 <= d <= MAX_DIM:
        raise ValueError(f"dimension must be in [2, {MAX_DIM}], got {d}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    if np.any(a < 0):
        raise ValueError("matrix entries must be nonnegative")
    return a


@dataclass(frozen=True)
class ConeMatrix:
    """Square nonnegative matrix whose every column has a positive entry.

    Column-sum norms are cached at construction and the entry buffer is
    frozen, so instances are immutable and safe to share across threads.
    ``col_max`` is the operator norm for the l1 vector norm, ``col_min``
    the matching lower bound: col_min * |x| <= |Ax| <= col_max * |x|.
    """

    entries: np.ndarray
    col_max: float
    col_min: float

    @classmethod
    def from_array(cls, entries) -> "ConeMatrix":
        a = _validated_square(entries)
        sums = a.sum(axis=0)
        if np.any(sums <= 0):
            j = int(np.argmin(sums))
            raise ValueError(f"column {j} has no positive entry (not allowable)")
        a = a.copy()
        a.setflags(write=False)
        return cls(entries=a, col_max=float(sums.max()), col_min=float(sums.min()))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def frak_n(self) -> float:
        """max(1/col_min, col_max); always >= 1."""
        return max(1.0 / self.col_min, self.col_max)

    def scaled(self, c: float) -> "ConeMatrix":
        if not c > 0:
            raise ValueError(f"scale must be positive, got {c}")
        return ConeMatrix.from_array(c * self.entries)

    def apply(self, x: "ConePoint") -> "ConePoint":
        if x.dim != self.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {x.dim}")
        return ConePoint.from_array(self.entries @ x.coords)

    def __matmul__(self, other: "ConeMatrix") -> "ConeMatrix":
        return compose(self, other)


@dataclass(frozen=True)
class ConePoint:
    """Vector in the nonnegative cone; ``norm`` is the l1 norm (coordinate sum)."""

    coords: np.ndarray

    @classmethod
    def from_array(cls, coords) -> "ConePoint":
        a = np.ascontiguousarray(coords, dtype=np.float64)
        if a.ndim != 1:
            raise ValueError(f"expected a vector, got shape {a.shape}")
        if not 2 <= a.shape[0] <= MAX_DIM:
            raise ValueError(f"dimension must be in [2, {MAX_DIM}], got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ValueError("coordinates must be finite")
        if np.any(a < 0):
            raise ValueError("coordinates must be nonnegative")
        a = a.copy()
        a.setflags(write=False)
        return cls(coords=a)

    @property
    def dim(self) -> int:
        return self.coords.shape[0]

    @property
    def norm(self) -> float:
        return float(self.coords.sum())


def _as_cone_matrix(A) -> ConeMatrix:
    return A if isinstance(A, ConeMatrix) else ConeMatrix.from_array(A)


def norms(A) -> tuple[float, float, float]:
    """Column-sum norms of an allowable matrix: (col_max, col_min, frak_n).

    Rejects matrices with a zero column.  frak_n = max(1/col_min, col_max)
    measures how far the matrix can move l1 norms in either direction.
    """
    A = _as_cone_matrix(A)
    return A.col_max, A.col_min, A.frak_n


def s_delta_margin(A) -> float:
    """Largest delta for which every row's entries differ by at most 1/delta.

    Returns min over rows with a positive sum of (row min)/(row max); the
    matrix satisfies the delta-row-uniformity condition iff delta <= this
    margin.  All-zero rows are skipped: the condition is vacuous on them.
    """
    A = _as_cone_matrix(A)
    e = A.entries
    row_max = e.max(axis=1)
    nz = row_max > 0
    return float(np.min(e.min(axis=1)[nz] / row_max[nz]))


def cone_margin(A) -> float:
    """min over nonzero rows i and all columns j of A[i,j] / (row i sum).

    For a matrix with s_delta_margin >= delta the result is >= delta/d:
    the transpose maps the cone into the proper subcone of vectors whose
    every coordinate is at least delta/d of the total mass.
    """
    A = _as_cone_matrix(A)
    e = A.entries
    row_sum = e.sum(axis=1)
    nz = row_sum > 0
    return float(np.min(e.min(axis=1)[nz] / row_sum[nz]))


def compose(A, B) -> ConeMatrix:
    """Matrix product of allowable matrices (allowable again).

    The product norm satisfies delta * |A| * |B| <= |AB| <= |A| * |B| when
    both factors have s_delta_margin >= delta, and the margin itself is
    preserved: s_delta_margin(AB) >= min of the factors' margins.
    """
    A, B = _as_cone_matrix(A), _as_cone_matrix(B)
    if A.dim != B.dim:
        raise ValueError(f"dimension mismatch: {A.dim} vs {B.dim}")
    return ConeMatrix.from_array(A.entries @ B.entries)


# Vectorized variants used by the hypothesis checks and the acceptance
# suite; they operate on stacked (n, d, d) arrays without constructing
# per-matrix objects.

def batch_col_norms(mats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(col_max, col_min) for a stack of matrices, shape (n, d, d) -> (n,), (n,)."""
    sums = mats.sum(axis=1)
    return sums.max(axis=1), sums.min(axis=1)


def batch_s_delta_margin(mats: np.ndarray) -> np.ndarray:
    """s_delta_margin for a stack of matrices; all-zero rows are skipped."""
    row_max = mats.max(axis=2)
    row_min = mats.min(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(row_max > 0, row_min / np.where(row_max > 0, row_max, 1.0), np.inf)
    return ratio.min(axis=1)


def batch_cone_margin(mats: np.ndarray) -> np.ndarray:
    """cone_margin for a stack of matrices; all-zero rows are skipped."""
    row_sum = mats.sum(axis=2)
    row_min = mats.min(axis=2)
    ratio = np.where(row_sum > 0, row_min / np.where(row_sum > 0, row_sum, 1.0), np.inf)
    return ratio.min(axis=1)
