"""Bounded projective distance on the simplex, projective actions and
contraction coefficients of allowable matrices.

The distance is d(x, y) = (1 - m(x,y) m(y,x)) / (1 + m(x,y) m(y,x)) with
m(x, y) = min over coordinates with y_i > 0 of x_i / y_i.  It is scale
invariant on the cone, bounded by 1, and every allowable matrix acts on
the simplex as a weak contraction for it; matrices whose rows are
delta-uniform contract by at least (1 - delta^4) / (1 + delta^4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cone import ConeMatrix, ConePoint, MAX_DIM

__all__ = [
    "Direction",
    "MetricConstants",
    "hennion_distance",
    "projective_action",
    "contraction_coefficient",
    "complete_zero_rows",
]


@dataclass(frozen=True)
class Direction:
    """Point of the simplex: nonnegative coordinates summing to 1."""

    coords: np.ndarray

    @classmethod
    def from_array(cls, coords) -> "Direction":
        """Normalize a nonzero nonnegative vector onto the simplex."""
        a = np.ascontiguousarray(coords, dtype=np.float64)
        if a.ndim != 1:
            raise ValueError(f"expected a vector, got shape {a.shape}")
        if not 2 <= a.shape[0] <= MAX_DIM:
            raise ValueError(f"dimension must be in [2, {MAX_DIM}], got {a.shape[0]}")
        if not np.all(np.isfinite(a)):
            raise ValueError("coordinates must be finite")
        if np.any(a < 0):
            raise ValueError("coordinates must be nonnegative")
        s = a.sum()
        if s <= 0:
            raise ValueError("cannot normalize the zero vector")
        a = a / s
        a.setflags(write=False)
        return cls(coords=a)

    @classmethod
    def vertex(cls, i: int, dim: int) -> "Direction":
        e = np.zeros(dim)
        e[i] = 1.0
        return cls.from_array(e)

    @classmethod
    def center(cls, dim: int) -> "Direction":
        return cls.from_array(np.full(dim, 1.0 / dim))

    @property
    def dim(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class MetricConstants:
    """Uniform contraction bound rho = (1 - delta^4) / (1 + delta^4)."""

    delta: float
    rho_delta: float

    @classmethod
    def for_delta(cls, delta: float) -> "MetricConstants":
        if not 0 < delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {delta}")
        d4 = delta**4
        return cls(delta=delta, rho_delta=(1.0 - d4) / (1.0 + d4))


def _coerce_cone_vector(x) -> np.ndarray:
    if isinstance(x, Direction):
        return x.coords
    if isinstance(x, ConePoint):
        a = x.coords
    else:
        a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1 or np.any(a < 0) or not np.all(np.isfinite(a)):
        raise ValueError("expected a finite nonnegative vector")
    if a.sum() <= 0:
        raise ValueError("the zero vector has no direction")
    return a


def _min_ratio(x: np.ndarray, y: np.ndarray) -> float:
    """min over coordinates with y_i > 0 of x_i / y_i; 0 when supports differ."""
    mask = y > 0
    return float(np.min(x[mask] / y[mask]))


def hennion_distance(x, y) -> float:
    """Bounded projective distance between two nonzero cone vectors.

    Accepts Direction, ConePoint or raw arrays; the value only depends on
    the rays through x and y.  Equals 0 iff x and y are proportional and 1
    iff their supports are disjoint in both directions.
    """
    xa, ya = _coerce_cone_vector(x), _coerce_cone_vector(y)
    if xa.shape != ya.shape:
        raise ValueError("dimension mismatch")
    p = _min_ratio(xa, ya) * _min_ratio(ya, xa)
    return (1.0 - p) / (1.0 + p)


def projective_action(A: ConeMatrix, x: Direction) -> tuple[Direction, float]:
    """Image direction of x under A and the log norm gain ln|Ax|.

    The gain is additive along products: the gain of AA' at x equals the
    gain of A at the image of x under A' plus the gain of A' at x.
    """
    y = A.entries @ x.coords
    s = float(y.sum())
    out = y / s
    out.setflags(write=False)
    return Direction(coords=out), float(np.log(s))


def contraction_coefficient(A) -> float:
    """Diameter of the image of the simplex under A, in the projective distance.

    The image of the simplex is the convex hull of the images of the
    vertices, and the diameter of a linear image is attained on extreme
    rays, so the max over column pairs is exact.  Submultiplicative over
    products and bounded by (1 - delta^4)/(1 + delta^4) for delta-uniform
    rows.
    """
    A = A if isinstance(A, ConeMatrix) else ConeMatrix.from_array(A)
    C = A.entries
    with np.errstate(divide="ignore", invalid="ignore"):
        r = C[:, :, None] / C[:, None, :]  # r[k, i, j] = C[k, i] / C[k, j]
    r = np.where(C[:, None, :] > 0, r, np.inf)
    m = r.min(axis=0)  # m[i, j] = min ratio of column i over column j
    p = m * m.T
    return float(((1.0 - p) / (1.0 + p)).max())


def complete_zero_rows(A) -> ConeMatrix:
    """Copy of A with every all-zero row replaced by its first nonzero row.

    The replacement changes neither projective images of distinct points
    nor the contraction coefficient, but restores the property that every
    row and every column holds a positive entry.  The donor row is the
    smallest-index row with a positive sum; the distance is independent of
    that choice, so determinism wins.
    """
    A = A if isinstance(A, ConeMatrix) else ConeMatrix.from_array(A)
    e = A.entries
    row_sum = e.sum(axis=1)
    nz = row_sum > 0
    if not nz.any():
        raise ValueError("all rows are zero")
    if nz.all():
        return A
    i0 = int(np.argmax(nz))
    out = e.copy()
    out[~nz] = e[i0]
    return ConeMatrix.from_array(out)


# Vectorized helpers for the batched engines: distances between rows of
# two (n, d) stacks of cone vectors.

def batch_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Projective distance row-by-row between two (n, d) nonneg stacks."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rx = np.where(y > 0, x / np.where(y > 0, y, 1.0), np.inf).min(axis=1)
        ry = np.where(x > 0, y / np.where(x > 0, x, 1.0), np.inf).min(axis=1)
    p = rx * ry
    return (1.0 - p) / (1.0 + p)


def bundle_diameter(dirs: np.ndarray) -> np.ndarray:
    """Max pairwise projective distance among matrix columns, batched.

    ``dirs`` has shape (n, d, d); columns are the tracked unit images of
    the basis vectors.  Returns shape (n,).
    """
    n, d, _ = dirs.shape
    best = np.zeros(n)
    for i in range(d):
        for j in range(i + 1, d):
            best = np.maximum(best, batch_distance(dirs[:, :, i], dirs[:, :, j]))
    return best
