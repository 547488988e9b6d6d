"""Exact ground truth for rank-one ensembles.

When every matrix atom is a positive multiple of the all-ones matrix, the
d-dimensional dynamics collapses exactly: |Ax| = d * beta * |x| for A =
beta * ones, so the radius follows a scalar affine recursion and the log
norm of products is an i.i.d. random walk.  Survival probabilities of
barrier crossings are then computable by exact dynamic programming on the
walk's lattice, giving an independent oracle for the Monte Carlo paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ensemble import EnsembleSpec
from .rng import TRAJECTORY, stream

__all__ = [
    "ScalarWalkSpec",
    "LatticeError",
    "rank_one_reduce",
    "first_passage_survival",
    "scalar_radius_path",
]


class LatticeError(ValueError):
    """Increments do not share a lattice; use Monte Carlo reference instead."""


@dataclass(frozen=True)
class ScalarWalkSpec:
    """Finite-support log-increment law, with the matching radius recursion.

    For an atom beta * ones with shift B the radius moves as
    r' = e^increment * r + |B|; increments are ln(d * beta * scale).
    """

    probs: np.ndarray
    increments: np.ndarray
    shifts: np.ndarray  # |B| per atom

    @property
    def mean_increment(self) -> float:
        return float(np.dot(self.probs, self.increments))


def rank_one_reduce(spec: EnsembleSpec) -> ScalarWalkSpec:
    """Scalar law of a rank-one ensemble; rejects anything else.

    Every atom matrix must have all entries equal (a positive multiple of
    the all-ones matrix); generator-family ensembles are not reducible.
    """
    if spec.atoms is None:
        raise ValueError("only finite-support ensembles reduce to a scalar walk")
    probs, incs, shifts = [], [], []
    for i, atom in enumerate(spec.atoms):
        e = atom.matrix.entries
        beta = e[0, 0]
        if beta <= 0 or not np.all(np.abs(e - beta) <= 1e-15 * beta):
            raise ValueError(f"atom {i} is not a positive multiple of the all-ones matrix")
        probs.append(atom.weight)
        incs.append(math.log(spec.dim * beta * spec.scale))
        shifts.append(atom.shift.norm)
    return ScalarWalkSpec(
        probs=np.asarray(probs), increments=np.asarray(incs), shifts=np.asarray(shifts)
    )


def _pair_gcd(a: float, b: float, tol: float) -> float:
    a, b = abs(a), abs(b)
    while b > tol:
        r = math.fmod(a, b)
        if r > b - tol:  # wrapped remainder of a near-multiple
            r = 0.0
        a, b = b, r
    return a


def _float_gcd(values: np.ndarray, rel_tol: float = 1e-9) -> float:
    """Approximate positive gcd of |values|; raises LatticeError on failure."""
    vals = np.abs(values[np.abs(values) > 0])
    if vals.size == 0:
        raise LatticeError("all increments are zero; no lattice step exists")
    tol = rel_tol * vals.max()
    g = float(vals[0])
    for v in vals[1:]:
        g = _pair_gcd(g, float(v), tol)
    if g <= tol:
        raise LatticeError(
            "increments are not commensurable; exact DP needs a common lattice "
            "step - fall back to a high-rep Monte Carlo reference"
        )
    ratios = vals / g
    if np.any(np.abs(ratios - np.round(ratios)) > 1e-6):
        raise LatticeError(
            "increments are not commensurable; exact DP needs a common lattice "
            "step - fall back to a high-rep Monte Carlo reference"
        )
    return g


def first_passage_survival(
    walk: ScalarWalkSpec, barrier: float, n_max: int
) -> np.ndarray:
    """Exact P(tau > n) for n = 1..n_max, tau the first n with S_n <= barrier.

    The crossing is non-strict, matching the <= in the stopping-time
    definitions.  Probabilities are propagated over the integer lattice of
    reachable partial sums with the sub-barrier states absorbed; cost is
    O(n_max * reachable width).
    """
    if barrier >= 0:
        raise ValueError(f"barrier must be negative, got {barrier}")
    if n_max > 10**5:
        raise ValueError(f"n_max capped at 1e5, got {n_max}")
    h = _float_gcd(walk.increments)
    units = np.round(walk.increments / h).astype(np.int64)
    if np.any(np.abs(walk.increments / h - units) > 1e-6):
        raise LatticeError("increments do not sit on the detected lattice")
    # non-strict crossing: S <= barrier  <=>  k <= floor(barrier / h + eps)
    k_barrier = int(math.floor(barrier / h + 1e-9))
    if k_barrier >= 0:
        return np.zeros(n_max)  # staying at 0 already crosses

    down = int(-units.min()) if units.min() < 0 else 0
    up = int(units.max()) if units.max() > 0 else 0
    if down == 0:
        return np.ones(n_max)  # the walk can never go down
    lo = k_barrier + 1  # smallest surviving lattice point
    width = (n_max * up - lo) + 1
    p = np.zeros(width)
    p[-lo] = 1.0  # index of lattice point k is k - lo
    occupied_hi = -lo
    survival = np.empty(n_max)
    nxt = np.zeros_like(p)
    for n in range(n_max):
        hi = occupied_hi
        nxt[: hi + up + 1] = 0.0
        for prob, u in zip(walk.probs, units):
            u = int(u)
            src = p[: hi + 1]
            if u >= 0:
                nxt[u : hi + 1 + u] += prob * src
            else:
                # mass shifted below lo is absorbed (crossed the barrier)
                nxt[: hi + 1 + u] += prob * src[-u:]
        p, nxt = nxt, p
        # the top tail underflows to exact float zeros; trimming them keeps
        # the live window ~sqrt(n) wide without dropping any mass
        occupied_hi = hi + up
        while occupied_hi > 0 and p[occupied_hi] == 0.0:
            occupied_hi -= 1
        survival[n] = p[: occupied_hi + 1].sum()
    return survival


def scalar_radius_path(
    walk: ScalarWalkSpec, r0: float, n: int, seed: int, path_index: int = 0
) -> np.ndarray:
    """Radii r_1..r_n of the scalar recursion r' = e^inc * r + shift.

    Consumes the same uniform per step as the full-dimensional sampler
    consumes per atom draw, from the same (seed, path index) stream, so
    the atom sequence matches the full simulation exactly.
    """
    gen = stream(seed, TRAJECTORY, path_index)
    cumw = np.cumsum(walk.probs)
    cumw[-1] = 1.0
    idx = np.minimum(np.searchsorted(cumw, gen.random(n), side="right"), len(cumw) - 1)
    growth = np.exp(walk.increments[idx])
    shift = walk.shifts[idx]
    out = np.empty(n)
    r = r0
    for t in range(n):
        r = growth[t] * r + shift[t]
        out[t] = r
    return out
