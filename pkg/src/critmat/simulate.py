"""Simulation of the affine recursion X -> AX + B and of matrix products:
single-step reference dynamics, observer-instrumented trajectory runs,
norm stopping times, and the ladder decomposition into i.i.d. blocks.

Trajectories are identified by (seed, path index); every operation that
replays the same index sees the same (A, B) draws, which is what makes
pathwise comparisons (vector vs norm stopping, oracle vs full dynamics,
reconstruction identities) exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .cone import ConeMatrix, ConePoint
from .engine import (
    STOP_TOL,
    ChainObserverConfig,
    RadialBinning,
    ladder_block,
    pair_distance_block,
    product_log_block,
    run_chain_block,
    stopping_block,
)
from .ensemble import EnsembleSpec
from .metric import Direction, bundle_diameter
from .rng import PREPASS, stream

__all__ = [
    "TrajectoryState",
    "LadderSample",
    "Exceeded",
    "ObserverReports",
    "OBSERVER_NAMES",
    "step",
    "run_trajectory",
    "stopping_time",
    "stopping_times",
    "ladder_decomposition",
    "harvest_ladder_blocks",
    "pair_distance_curve",
    "product_log_norms",
    "DEFAULT_STOPPING_CAP",
    "DEFAULT_LADDER_CAP",
]

OBSERVER_NAMES = frozenset({"conservativity", "contractivity", "bernoulli", "occupation"})

# Caps are reported, never silently absorbed: stopping times have infinite
# mean in the critical regime, so some paths will always outlive any cap.
DEFAULT_STOPPING_CAP = 10**7
DEFAULT_LADDER_CAP = 10**8


@dataclass(frozen=True)
class Exceeded:
    """Sentinel: the stopping condition did not trigger within the cap."""

    cap: int


@dataclass(frozen=True)
class TrajectoryState:
    """Log-scaled chain state: X = e^u * w plus running product statistics.

    ``product_log_norm`` tracks ln|A_{n,1}| through a column bundle (log
    scale, unit direction per basis image), so it never overflows;
    ``product_direction_diameter`` is the bundle's projective diameter,
    nonincreasing in n (it certifies collapse toward rank one).
    """

    log_radius: float
    direction: Direction
    step_count: int
    product_log_norm: float
    product_direction_diameter: float
    bundle_logs: np.ndarray
    bundle_dirs: np.ndarray

    @classmethod
    def from_point(cls, x: ConePoint) -> "TrajectoryState":
        d = x.dim
        r = x.norm
        if r > 0:
            u, w = math.log(r), Direction.from_array(x.coords)
        else:
            u, w = -math.inf, Direction.center(d)
        return cls(
            log_radius=u,
            direction=w,
            step_count=0,
            product_log_norm=0.0,
            product_direction_diameter=1.0,
            bundle_logs=np.zeros(d),
            bundle_dirs=np.eye(d),
        )

    @property
    def point(self) -> np.ndarray:
        """X reconstructed as e^u * w (0 for the dead state)."""
        if self.log_radius == -math.inf:
            return np.zeros(self.direction.dim)
        return math.exp(self.log_radius) * self.direction.coords


def step(state: TrajectoryState, pair: tuple[ConeMatrix, ConePoint]) -> TrajectoryState:
    """One move X -> AX + B in log coordinates (reference implementation).

    The batched kernels implement the same update; this single-path form
    is the oracle the kernels are tested against.
    """
    A, b = pair
    u = np.array([state.log_radius])
    w = state.direction.coords[None, :].copy()
    u2, w2 = engine.advance_state(u, w, A.entries[None, :, :], b.coords[None, :])
    logs, dirs = engine.update_bundle(
        state.bundle_logs[None, :], state.bundle_dirs[None, :, :], A.entries[None, :, :]
    )
    diam = min(state.product_direction_diameter, float(bundle_diameter(dirs)[0]))
    wa = w2[0]
    wa.setflags(write=False)
    return TrajectoryState(
        log_radius=float(u2[0]),
        direction=Direction(coords=wa),
        step_count=state.step_count + 1,
        product_log_norm=float(logs[0].max()),
        product_direction_diameter=diam,
        bundle_logs=logs[0],
        bundle_dirs=dirs[0],
    )


@dataclass
class ObserverReports:
    """Per-path observer outputs of :func:`run_trajectory`.

    All arrays have leading dimension ``paths``.  Contraction medians are
    log l1 differences at return times per half (-inf marks coalescence
    to zero distance); bernoulli counts are the running divergent sums at
    the decade checkpoints.
    """

    paths: int
    n_steps: int
    final_log_radius: np.ndarray
    final_direction: np.ndarray
    product_log_norm: np.ndarray | None = None
    running_min_radius: np.ndarray | None = None
    small_product_count: np.ndarray | None = None
    contraction_half_medians: np.ndarray | None = None
    contraction_return_counts: np.ndarray | None = None
    contraction_window: float | None = None
    bernoulli_checkpoints: np.ndarray | None = None
    bernoulli_steps: np.ndarray | None = None
    bernoulli_epsilon: float | None = None
    occupation_counts: np.ndarray | None = None
    occupation_batch_radial: np.ndarray | None = None
    occupation_out_of_range: np.ndarray | None = None
    occupation_binning: RadialBinning | None = None
    product_direction_diameter: np.ndarray | None = None


def _prepass_pairs(spec: EnsembleSpec, seed: int, n: int = 10_000):
    law = spec.compile()
    return law.draw(stream(seed, PREPASS, 0), n)


def default_bernoulli_epsilon(spec: EnsembleSpec, seed: int) -> float:
    """25th percentile of |B| / |A| over a pre-pass; positive whenever
    the shift law is not identically zero."""
    mats, shifts = _prepass_pairs(spec, seed)
    ratio = shifts.sum(axis=1) / mats.sum(axis=1).max(axis=1)
    eps = float(np.quantile(ratio, 0.25))
    if eps <= 0:
        pos = ratio[ratio > 0]
        eps = float(pos.min()) if pos.size else 0.0
    return eps


def default_contraction_window(spec: EnsembleSpec, x0: np.ndarray, seed: int) -> float:
    """10 x median radius over a 10^4-step pre-pass trajectory."""
    law = spec.compile()
    gen = stream(seed, PREPASS, 1)
    mats, shifts = law.draw(gen, 10_000)
    u = math.log(float(np.sum(x0))) if np.sum(x0) > 0 else -math.inf
    w = np.asarray(x0, float) / max(float(np.sum(x0)), 1e-300)
    us = np.empty(len(mats))
    uu = np.array([u])
    ww = w[None, :].copy()
    for t in range(len(mats)):
        uu, ww = engine.advance_state(uu, ww, mats[t][None], shifts[t][None])
        us[t] = uu[0]
    return 10.0 * float(np.exp(np.median(us)))


def run_trajectory(
    spec: EnsembleSpec,
    x0,
    n: int,
    observers,
    seed: int,
    paths: int = 1,
    first_index: int = 0,
    y0=None,
    contraction_window: float | None = None,
    bernoulli_epsilon: float | None = None,
    checkpoints: tuple = (),
    binning: RadialBinning | None = None,
    track_diameter: bool = False,
) -> ObserverReports:
    """Run the affine chain for n steps under the requested observers.

    observers is any subset of {"conservativity", "contractivity",
    "bernoulli", "occupation"}; unknown names are rejected.  The paired
    trajectory of the contractivity observer starts at ``y0`` and shares
    every (A, B) draw with the main path.
    """
    observers = frozenset(observers)
    unknown = observers - OBSERVER_NAMES
    if unknown:
        raise ValueError(f"unknown observer name(s): {sorted(unknown)}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    x0 = x0.coords if isinstance(x0, ConePoint) else np.asarray(x0, dtype=np.float64)

    if "contractivity" in observers:
        if y0 is None:
            raise ValueError("contractivity observer needs a paired start y0")
        y0 = y0.coords if isinstance(y0, ConePoint) else np.asarray(y0, dtype=np.float64)
        if contraction_window is None:
            contraction_window = default_contraction_window(spec, x0, seed)
    if "bernoulli" in observers:
        if bernoulli_epsilon is None:
            bernoulli_epsilon = default_bernoulli_epsilon(spec, seed)
        if not checkpoints:
            checkpoints = tuple(10**j for j in range(2, 20) if 10**j <= n) or (n,)
    if "occupation" in observers and binning is None:
        binning = RadialBinning()

    config = ChainObserverConfig(
        observers=observers,
        y0=y0,
        contraction_window=contraction_window,
        bernoulli_eps=bernoulli_epsilon,
        checkpoints=checkpoints,
        binning=binning,
        track_diameter=track_diameter,
    )
    raw = run_chain_block(spec.compile(), seed, first_index, paths, x0, n, config)

    rep = ObserverReports(
        paths=paths,
        n_steps=n,
        final_log_radius=raw["final_log_radius"],
        final_direction=raw["final_direction"],
        product_log_norm=raw.get("product_log_norm"),
        running_min_radius=raw.get("running_min_radius"),
        small_product_count=raw.get("small_product_count"),
        bernoulli_checkpoints=raw.get("bernoulli_checkpoints"),
        bernoulli_steps=raw.get("bernoulli_steps"),
        bernoulli_epsilon=bernoulli_epsilon,
        occupation_counts=raw.get("occupation_counts"),
        occupation_batch_radial=raw.get("occupation_batch_radial"),
        occupation_out_of_range=raw.get("occupation_out_of_range"),
        occupation_binning=binning,
        product_direction_diameter=raw.get("product_direction_diameter"),
        contraction_window=contraction_window,
    )
    if "contractivity" in observers:
        hist = raw["contraction_diff_hist"]
        counts = raw["contraction_return_count"]
        medians = np.empty((paths, 2))
        for i in range(paths):
            for h in (0, 1):
                medians[i, h] = engine.diff_hist_median(hist[i, h], int(counts[i, h]))
        rep.contraction_half_medians = medians
        rep.contraction_return_counts = counts
    return rep


def stopping_times(
    spec: EnsembleSpec,
    mode: str,
    a: float,
    cap: int,
    seed: int,
    x=None,
    paths: int = 1,
    first_index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched stopping times; returns (tau, exceeded) with tau = cap + 1
    on exceeded paths.  mode "vector" waits for a|A_{n,1}x| <= 1 (x is
    normalized to the simplex), mode "norm" for a|A_{n,1}| <= 1; the
    vector time never exceeds the norm time on shared draws."""
    if a < 1:
        raise ValueError(f"a must be >= 1, got {a}")
    if cap < 1:
        raise ValueError(f"cap must be positive, got {cap}")
    if mode == "vector":
        if x is None:
            raise ValueError("vector mode needs a starting direction x")
        x = x.coords if isinstance(x, (ConePoint, Direction)) else np.asarray(x, float)
    elif mode != "norm":
        raise ValueError(f"mode must be 'vector' or 'norm', got {mode!r}")
    tau = stopping_block(spec.compile(), seed, first_index, paths, a, cap, mode, x)
    return tau, tau > cap


def stopping_time(
    spec: EnsembleSpec,
    mode: str,
    a: float,
    cap: int = DEFAULT_STOPPING_CAP,
    seed: int = 0,
    x=None,
    path_index: int = 0,
):
    """Single-path stopping time: an integer, or Exceeded(cap)."""
    tau, exceeded = stopping_times(spec, mode, a, cap, seed, x=x, paths=1, first_index=path_index)
    return Exceeded(cap) if exceeded[0] else int(tau[0])


@dataclass(frozen=True)
class LadderSample:
    """Ladder times and the block variables they induce on one path.

    Blocks satisfy a * |block matrix| <= 1 each, so the product of the
    first k blocks has norm at most a^-k; the chain value at the last
    ladder time reconstructs from the blocks exactly.
    """

    a: float
    x0: np.ndarray
    times: np.ndarray               # tau_1 .. tau_K (tau_0 = 0 implicit)
    block_matrices: tuple           # scaled (d, d) arrays
    block_shifts: tuple             # (d,) arrays
    block_log1p_shift: np.ndarray
    truncated: bool
    final_log_radius: float
    final_direction: np.ndarray
    product_log_norm: float         # ln |last-closed-block product|

    @property
    def k(self) -> int:
        return len(self.block_matrices)

    def reconstruct_final(self) -> np.ndarray:
        """X at the last ladder time from x0 and the block variables.

        Suffix products are accumulated in scaled form; prefactors beyond
        float range contribute exactly 0, which is below any tolerance the
        dominant recent blocks leave visible.
        """
        d = len(self.x0)
        acc = np.zeros(d)
        log_scale = 0.0
        suffix = np.eye(d)
        for ell in range(self.k - 1, -1, -1):
            term = suffix @ self.block_shifts[ell]
            acc = acc + math.exp(min(log_scale, 700.0)) * term
            mat = suffix @ self.block_matrices[ell]
            s = mat.sum(axis=0).max()
            log_scale += math.log(s)
            suffix = mat / s
        return acc + math.exp(min(log_scale, 700.0)) * (suffix @ self.x0)


def ladder_decomposition(
    spec: EnsembleSpec,
    x0,
    a: float,
    k_max: int,
    cap: int = DEFAULT_LADDER_CAP,
    seed: int = 0,
    path_index: int = 0,
) -> LadderSample:
    """Decompose one path into k_max norm-drop blocks (or fewer at the cap)."""
    if not a > 1:
        raise ValueError(f"a must be > 1, got {a}")
    x0 = x0.coords if isinstance(x0, ConePoint) else np.asarray(x0, dtype=np.float64)
    raw = ladder_block(
        spec.compile(), seed, path_index, 1, a, k_max, cap, x0=x0, store_blocks=True
    )
    k = int(raw["blocks_done"][0])
    if k == 0:
        raise RuntimeError(f"cap {cap} hit before the first ladder time")
    return LadderSample(
        a=a,
        x0=x0,
        times=raw["times"][0, :k].copy(),
        block_matrices=tuple(raw["block_matrices"][0]),
        block_shifts=tuple(raw["block_shifts"][0]),
        block_log1p_shift=raw["block_log1p_shift"][0, :k].copy(),
        truncated=bool(raw["truncated"][0]),
        final_log_radius=float(raw["final_log_radius"][0]),
        final_direction=raw["final_direction"][0].copy(),
        product_log_norm=float(raw["product_log_norm"][0]),
    )


def harvest_ladder_blocks(
    spec: EnsembleSpec,
    a: float,
    k_max: int,
    cap: int,
    seed: int,
    paths: int,
    first_index: int = 0,
) -> dict:
    """Block statistics over many paths (no matrices stored): per-path
    times, log block norms, ln(1+|shift|) samples, completion flags."""
    if not a > 1:
        raise ValueError(f"a must be > 1, got {a}")
    return ladder_block(spec.compile(), seed, first_index, paths, a, k_max, cap)


def pair_distance_curve(
    spec: EnsembleSpec,
    n_steps: int,
    paths: int,
    seed: int,
    x0,
    y0,
    first_index: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean projective distance between two starts pushed through shared
    products, with standard errors: arrays of shape (n_steps,)."""
    x0 = np.asarray(x0, dtype=np.float64)
    y0 = np.asarray(y0, dtype=np.float64)
    d = pair_distance_block(spec.compile(), seed, first_index, paths, n_steps, x0, y0)
    return d.mean(axis=0), d.std(axis=0, ddof=1) / math.sqrt(paths)


def product_log_norms(
    spec: EnsembleSpec, n: int, reps: int, seed: int, first_index: int = 0
) -> np.ndarray:
    """ln |A_{n,1}| across reps product paths (log-domain, any horizon)."""
    return product_log_block(spec.compile(), seed, first_index, reps, n)
