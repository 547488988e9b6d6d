"""Vectorized Monte Carlo kernels for the affine recursion and matrix products.

All kernels advance a block of independent paths in lockstep; path i of a
block starting at ``first_index`` owns the stream (seed, TRAJECTORY,
first_index + i) and consumes its uniforms in a canonical per-draw order,
so any two kernels replaying the same path index see the same (A, B)
sequence.  Results are mergeable across blocks in index order, which makes
outputs independent of how blocks are assigned to workers.

State is kept in log coordinates: a path is (u, w) with radius e^u and
simplex direction w, and the running matrix product is a column bundle of
(log scale, unit column) pairs, so nothing overflows at any horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import TRAJECTORY, stream

__all__ = [
    "CompiledLaw",
    "ChainObserverConfig",
    "RadialBinning",
    "run_chain_block",
    "stopping_block",
    "ladder_block",
    "vector_log_block",
    "product_log_block",
    "pair_distance_block",
    "direction_cells",
    "n_direction_cells",
    "STOP_TOL",
]

# Stopping conditions compare accumulated log norms against -ln(a); exact
# ties occur for lattice ensembles, so the comparison carries an absolute
# slack far below any lattice gap but far above accumulated rounding.
STOP_TOL = 1e-9

# Affine steps recenter at the additive term once the radius drops below
# e^-600; beyond that exp(-u) would overflow against desk-scale B.
_TINY_LOG_RADIUS = -600.0

_REJECTION_LIMIT = 10**6


# Reductions over the tiny matrix axes dominate the per-step cost when
# dispatched through ufunc machinery; unrolled column loops are ~8x faster
# for the d <= 8 block sizes this package targets.

def _sum1(x: np.ndarray) -> np.ndarray:
    """x.sum(axis=1) for small middle axes, shape (B, k[, ...]) -> (B[, ...])."""
    k = x.shape[1]
    acc = x[:, 0] + x[:, 1]
    for j in range(2, k):
        acc += x[:, j]
    return acc


def _max1(x: np.ndarray) -> np.ndarray:
    """x.max(axis=1) for small middle axes."""
    k = x.shape[1]
    acc = np.maximum(x[:, 0], x[:, 1])
    for j in range(2, k):
        np.maximum(acc, x[:, j], out=acc)
    return acc


def _matvec(A: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Batched A @ w for (B, d, d) x (B, d) with unrolled columns."""
    d = w.shape[1]
    acc = A[:, :, 0] * w[:, 0, None] + A[:, :, 1] * w[:, 1, None]
    for j in range(2, d):
        acc += A[:, :, j] * w[:, j, None]
    return acc


def _matmat(A: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Batched A @ D for stacks of small square matrices."""
    if A.shape[1] > 4:
        return A @ D
    d = A.shape[1]
    # out[b, i, k] = sum_j A[b, i, j] * D[b, j, k]
    acc = A[:, :, 0][:, :, None] * D[:, 0, :][:, None, :]
    for j in range(1, d):
        acc += A[:, :, j][:, :, None] * D[:, j, :][:, None, :]
    return acc


@dataclass(frozen=True)
class CompiledLaw:
    """Sampling-ready form of an ensemble law.

    Exactly one of ``atom_*`` (finite support) or ``gen_*`` (log-uniform
    entries with row clamping) is populated.  ``scale`` has already been
    folded into the atom matrices; for the generator family it is applied
    after projection.

    Draw contract: each (A, B) pair consumes, in order, 1 uniform (atom
    index) for finite laws, or d*d row-major entry uniforms followed by d
    shift uniforms for the generator family.  Kernels may buffer uniforms
    in chunks; the consumed sequence is identical either way.
    """

    dim: int
    delta: float
    scale: float
    atom_cumw: np.ndarray | None = None
    atom_mats: np.ndarray | None = None   # (k, d, d), scale folded in
    atom_shifts: np.ndarray | None = None  # (k, d)
    gen_entry_range: tuple[float, float] | None = None  # log10 bounds
    gen_shift_range: tuple[float, float] | None = None

    @property
    def uniforms_per_draw(self) -> int:
        if self.atom_cumw is not None:
            return 1
        return self.dim * self.dim + self.dim

    def materialize(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(A, B) pairs from uniform draws of shape (..., uniforms_per_draw)."""
        d = self.dim
        if self.atom_cumw is not None:
            idx = np.searchsorted(self.atom_cumw, u[..., 0], side="right")
            idx = np.minimum(idx, len(self.atom_cumw) - 1)
            return self.atom_mats[idx], self.atom_shifts[idx]
        lo, hi = self.gen_entry_range
        blo, bhi = self.gen_shift_range
        ents = 10.0 ** (lo + (hi - lo) * u[..., : d * d])
        mats = ents.reshape(*u.shape[:-1], d, d)
        row_max = mats.max(axis=-1, keepdims=True)
        mats = np.maximum(mats, self.delta * row_max) * self.scale
        shifts = 10.0 ** (blo + (bhi - blo) * u[..., d * d :])
        return mats, shifts

    def draw(self, gen: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """n pairs from one stream; resamples (counted) if projection ever fails."""
        mats, shifts = self.materialize(gen.random((n, self.uniforms_per_draw)))
        if self.atom_cumw is None:
            from .cone import batch_s_delta_margin

            bad = np.flatnonzero(batch_s_delta_margin(mats) < self.delta * (1 - 1e-12))
            rejections = 0
            while bad.size:
                rejections += len(bad)
                if rejections > _REJECTION_LIMIT:
                    raise RuntimeError(
                        f"generator law rejected {rejections} draws in a row; "
                        "the projection should make this impossible"
                    )
                re_m, re_s = self.materialize(gen.random((len(bad), self.uniforms_per_draw)))
                mats[bad], shifts[bad] = re_m, re_s
                bad = bad[batch_s_delta_margin(mats[bad]) < self.delta * (1 - 1e-12)]
        return mats, shifts


class _BlockDraws:
    """Chunk of buffered pair draws for the active paths of a block.

    For finite laws the atom index array for the whole chunk is exposed as
    ``atom_idx`` so chunk-level statistics can be vectorized.
    """

    def __init__(self, law: CompiledLaw, gens: list, active: np.ndarray, c: int):
        self.law = law
        m = law.uniforms_per_draw
        buf = np.empty((len(active), c, m))
        for row, path in enumerate(active):
            buf[row] = gens[path].random((c, m))
        self.buf = buf
        if law.atom_cumw is not None:
            self.atom_idx = np.minimum(
                np.searchsorted(law.atom_cumw, buf[:, :, 0], side="right"),
                len(law.atom_cumw) - 1,
            )
        else:
            self.atom_idx = None

    def step(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        if self.atom_idx is not None:
            idx = self.atom_idx[:, t]
            return self.law.atom_mats[idx], self.law.atom_shifts[idx]
        return self.law.materialize(self.buf[:, t, :])


def _chunk_steps(law: CompiledLaw, n_paths: int, requested: int | None = None) -> int:
    """Steps buffered per chunk, sized to keep draw buffers around 32 MB."""
    if requested:
        return requested
    budget = 4 * 2**20  # doubles
    per_step = max(1, n_paths * law.uniforms_per_draw)
    return int(np.clip(budget // per_step, 16, 4096))


def advance_state(u, w, A, b):
    """One affine step X -> AX + B in log coordinates, batched.

    Normal branch: y = A w + e^-u b, u' = u + ln|y|.  When u is very
    negative (including -inf for X = 0) the roles swap: y = e^u A w + b,
    u' = ln|y|; one of the two centerings is always well scaled.  X = 0
    with B = 0 stays put.
    """
    Aw = _matvec(A, w)
    tiny = u < _TINY_LOG_RADIUS
    if not tiny.any():
        y = Aw + np.exp(-u)[:, None] * b
        s = _sum1(y)
        return u + np.log(s), y / s[:, None]
    u_new = np.empty_like(u)
    w_new = np.empty_like(w)
    big = ~tiny
    if big.any():
        y = Aw[big] + np.exp(-u[big])[:, None] * b[big]
        s = _sum1(y)
        u_new[big] = u[big] + np.log(s)
        w_new[big] = y / s[:, None]
    yt = np.exp(u[tiny])[:, None] * Aw[tiny] + b[tiny]
    st = yt.sum(axis=1)
    alive = st > 0
    with np.errstate(divide="ignore"):
        u_new[tiny] = np.where(alive, np.log(np.where(alive, st, 1.0)), -np.inf)
    w_new[tiny] = np.where(alive[:, None], yt / np.where(alive, st, 1.0)[:, None], w[tiny])
    return u_new, w_new


def update_bundle(logs, dirs, A):
    """Advance the column bundle of a running product by one left factor.

    Column j of the true product is e^(logs_j) * dirs[:, j] with unit
    column; the product's norm is max_j e^(logs_j).
    """
    T = _matmat(A, dirs)
    cs = _sum1(T)
    return logs + np.log(cs), T / cs[:, None, :]


def _identity_bundle(n: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.zeros((n, d)), np.broadcast_to(np.eye(d), (n, d, d)).copy()


def n_direction_cells(d: int) -> int:
    return d * (d - 1) + 1


_CENTER_FRACTION = {}


def direction_cells(w: np.ndarray) -> np.ndarray:
    """Coarse simplex cell per row: (top vertex, runner-up) pairs plus a center.

    Rows whose largest weight stays below 1/d + (1 - 1/d)/3 fall in the
    center cell (index d(d-1)); the remaining d(d-1) cells are ordered
    (argmax, second argmax) pairs.
    """
    n, d = w.shape
    thresh = _CENTER_FRACTION.setdefault(d, (d + 2.0) / (3.0 * d))
    i1 = w.argmax(axis=1)
    rows = np.arange(n)
    top = w[rows, i1]
    masked = w.copy()
    masked[rows, i1] = -1.0
    i2 = masked.argmax(axis=1)
    cell = i1 * (d - 1) + i2 - (i2 > i1)
    return np.where(top <= thresh, d * (d - 1), cell)


@dataclass(frozen=True)
class RadialBinning:
    """Uniform bins in ln|x|: bin k covers [k*width, (k+1)*width)."""

    width: float = float(np.log(2.0))
    k_lo: int = -128
    k_hi: int = 4400
    n_batches: int = 20

    @property
    def n_bins(self) -> int:
        return self.k_hi - self.k_lo


@dataclass(frozen=True)
class ChainObserverConfig:
    """What the chain kernel should watch; every field optional.

    observers may contain "conservativity", "contractivity", "bernoulli",
    "occupation".  Contractivity needs ``y0`` (paired start, same draws)
    and ``contraction_window`` K; bernoulli needs ``bernoulli_eps`` and
    checkpoint steps; occupation needs a ``binning``.
    """

    observers: frozenset = frozenset()
    y0: np.ndarray | None = None
    contraction_window: float | None = None
    bernoulli_eps: float | None = None
    checkpoints: tuple = ()
    binning: RadialBinning | None = None
    track_diameter: bool = False


_DIFF_LO, _DIFF_W, _DIFF_NB = -760.0, 1.0, 816


def _log_diff(u1, w1, u2, w2):
    """log l1 distance between states given in log coordinates (-inf if equal)."""
    m = np.maximum(u1, u2)
    m = np.where(np.isfinite(m), m, 0.0)
    dv = np.exp(u1 - m)[:, None] * w1 - np.exp(u2 - m)[:, None] * w2
    s = _sum1(np.abs(dv))
    with np.errstate(divide="ignore"):
        return m + np.log(s)


def run_chain_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    x0: np.ndarray,
    n_steps: int,
    config: ChainObserverConfig,
    chunk: int | None = None,
) -> dict:
    """Drive n_paths copies of the affine chain for n_steps, all observers in one pass.

    Returns a dict of mergeable per-path accumulators; see the observer
    wrappers in :mod:`critmat.simulate` for the public shapes.
    """
    d = law.dim
    obs = config.observers
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]

    x0 = np.asarray(x0, dtype=np.float64)
    r0 = x0.sum()
    if r0 > 0:
        u = np.full(n_paths, np.log(r0))
        w = np.broadcast_to(x0 / r0, (n_paths, d)).copy()
    else:
        u = np.full(n_paths, -np.inf)
        w = np.full((n_paths, d), 1.0 / d)

    paired = "contractivity" in obs
    if paired:
        y0 = np.asarray(config.y0, dtype=np.float64)
        ry = y0.sum()
        u2 = np.full(n_paths, np.log(ry) if ry > 0 else -np.inf)
        w2 = np.broadcast_to(y0 / ry if ry > 0 else np.full(d, 1.0 / d), (n_paths, d)).copy()
        ln_K = np.log(config.contraction_window)
        diff_hist = np.zeros((n_paths, 2, _DIFF_NB), dtype=np.int64)
        return_count = np.zeros((n_paths, 2), dtype=np.int64)
        half_step = n_steps // 2

    need_bundle = bool({"conservativity", "bernoulli"} & obs) or config.track_diameter
    if need_bundle:
        logs, dirs = _identity_bundle(n_paths, d)
        prev_prod_max = np.zeros(n_paths)  # ln norm of the empty product

    if "conservativity" in obs:
        run_min_u = u.copy()
        small_product_count = np.zeros(n_paths, dtype=np.int64)

    if "bernoulli" in obs:
        eps = config.bernoulli_eps
        checkpoints = sorted(set(config.checkpoints))
        checkpoint_counts = np.zeros((n_paths, len(checkpoints)), dtype=np.int64)
        running = np.zeros(n_paths, dtype=np.int64)
        atom_eps_flag = None
        if law.atom_cumw is not None:
            atom_norms = law.atom_mats.sum(axis=1).max(axis=1)
            atom_eps_flag = law.atom_shifts.sum(axis=1) / atom_norms >= eps

    occupation = "occupation" in obs
    if occupation:
        binning = config.binning
        n_dir = n_direction_cells(d)
        counts = np.zeros((n_paths, binning.n_bins * n_dir), dtype=np.int64)
        batch_radial = np.zeros((n_paths, binning.n_batches, binning.n_bins), dtype=np.int64)
        out_of_range = np.zeros(n_paths, dtype=np.int64)

    c_max = _chunk_steps(law, n_paths, chunk)
    done = 0
    while done < n_steps:
        c = min(c_max, n_steps - done)
        draws = _BlockDraws(law, gens, np.arange(n_paths), c)
        u_hist = np.empty((n_paths, c)) if (occupation or "conservativity" in obs) else None
        prod_hist = np.empty((n_paths, c)) if need_bundle else None
        eta_hist = np.empty((n_paths, c), dtype=bool) if "bernoulli" in obs else None
        eps_hist = np.empty((n_paths, c), dtype=bool) if "bernoulli" in obs else None
        cell_hist = np.empty((n_paths, c), dtype=np.int64) if occupation else None
        diff_hist_buf = np.empty((n_paths, c)) if paired else None
        ind_hist = np.empty((n_paths, c), dtype=bool) if paired else None

        if "bernoulli" in obs and atom_eps_flag is not None:
            eps_hist[:] = atom_eps_flag[draws.atom_idx]
        for t in range(c):
            A, b = draws.step(t)
            if "bernoulli" in obs:
                eta_hist[:, t] = prev_prod_max <= STOP_TOL
                if atom_eps_flag is None:
                    eps_hist[:, t] = b.sum(axis=1) / A.sum(axis=1).max(axis=1) >= eps
            u, w = advance_state(u, w, A, b)
            if paired:
                u2, w2 = advance_state(u2, w2, A, b)
                diff_hist_buf[:, t] = _log_diff(u, w, u2, w2)
                ind_hist[:, t] = u <= ln_K
            if need_bundle:
                logs, dirs = update_bundle(logs, dirs, A)
                prev_prod_max = _max1(logs)
                prod_hist[:, t] = prev_prod_max
            if u_hist is not None:
                u_hist[:, t] = u
            if occupation:
                cell_hist[:, t] = direction_cells(w)

        if "conservativity" in obs:
            run_min_u = np.minimum(run_min_u, u_hist.min(axis=1))
            small_product_count += (prod_hist <= STOP_TOL).sum(axis=1)

        if "bernoulli" in obs:
            contrib = (eta_hist & eps_hist).astype(np.int64)
            cum = contrib.cumsum(axis=1)
            for ci, cp in enumerate(checkpoints):
                if done < cp <= done + c:
                    checkpoint_counts[:, ci] = running + cum[:, cp - done - 1]
            running += cum[:, -1]

        if occupation:
            k_idx = np.floor(u_hist / binning.width).astype(np.int64)
            in_range = (k_idx >= binning.k_lo) & (k_idx < binning.k_hi)
            flat = (k_idx - binning.k_lo) * n_dir + cell_hist
            batch_idx = ((done + np.arange(c)) * binning.n_batches) // n_steps
            for i in range(n_paths):
                sel = in_range[i]
                counts[i] += np.bincount(flat[i][sel], minlength=counts.shape[1])
                out_of_range[i] += int((~sel).sum())
                for bi in np.unique(batch_idx):
                    cols = sel & (batch_idx == bi)
                    batch_radial[i, bi] += np.bincount(
                        k_idx[i][cols] - binning.k_lo, minlength=binning.n_bins
                    )

        if paired:
            halves = (done + np.arange(c)) >= half_step
            bins = np.clip(
                np.floor((diff_hist_buf - _DIFF_LO) / _DIFF_W), 0, _DIFF_NB - 1
            ).astype(np.int64)
            for h in (0, 1):
                sel = ind_hist & (halves == bool(h))[None, :]
                rows, cols = np.nonzero(sel)
                np.add.at(diff_hist, (rows, np.full_like(rows, h), bins[rows, cols]), 1)
                return_count[:, h] += sel.sum(axis=1)

        done += c

    out: dict = {"final_log_radius": u, "final_direction": w}
    if need_bundle:
        out["product_log_norm"] = logs.max(axis=1)
        out["bundle_logs"] = logs
        out["bundle_dirs"] = dirs
    if config.track_diameter:
        from .metric import bundle_diameter

        out["product_direction_diameter"] = bundle_diameter(dirs)
    if "conservativity" in obs:
        out["running_min_radius"] = np.exp(run_min_u)
        out["small_product_count"] = small_product_count
    if "bernoulli" in obs:
        out["bernoulli_checkpoints"] = checkpoint_counts
        out["bernoulli_steps"] = np.asarray(checkpoints, dtype=np.int64)
        out["bernoulli_total"] = running
    if paired:
        out["contraction_diff_hist"] = diff_hist
        out["contraction_return_count"] = return_count
        out["paired_final_log_radius"] = u2
    if occupation:
        out["occupation_counts"] = counts.reshape(n_paths, binning.n_bins, n_dir)
        out["occupation_batch_radial"] = batch_radial
        out["occupation_out_of_range"] = out_of_range
    return out


def diff_hist_median(hist_row: np.ndarray, count: int) -> float:
    """Median log-difference from an accumulated histogram row (-inf if empty bin 0)."""
    if count == 0:
        return float("nan")
    cum = np.cumsum(hist_row)
    b = int(np.searchsorted(cum, (count + 1) // 2))
    if b == 0:
        return -np.inf  # bin 0 absorbs exact coalescence
    return _DIFF_LO + (b + 0.5) * _DIFF_W


def stopping_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    a: float,
    cap: int,
    mode: str,
    x0: np.ndarray | None = None,
    chunk: int | None = None,
) -> np.ndarray:
    """First n with a * |A_{n,1} x| <= 1 (vector) or a * |A_{n,1}| <= 1 (norm).

    Returns int64 taus; cap + 1 marks paths that never stopped within cap.
    """
    d = law.dim
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]
    thresh = -np.log(a) + STOP_TOL
    tau = np.full(n_paths, cap + 1, dtype=np.int64)
    active = np.arange(n_paths)

    if mode == "vector":
        x0 = np.asarray(x0, dtype=np.float64)
        w = np.broadcast_to(x0 / x0.sum(), (n_paths, d)).copy()
        logr = np.zeros(n_paths)
    elif mode == "norm":
        logs, dirs = _identity_bundle(n_paths, d)
    else:
        raise ValueError(f"unknown stopping mode {mode!r}")

    c_max = _chunk_steps(law, n_paths, chunk)
    done = 0
    while active.size and done < cap:
        c = min(c_max, cap - done)
        draws = _BlockDraws(law, gens, active, c)
        alive = np.ones(active.size, dtype=bool)
        if mode == "vector":
            w_a, logr_a = w[active], logr[active]
        else:
            logs_a, dirs_a = logs[active], dirs[active]
        for t in range(c):
            A, _ = draws.step(t)
            if mode == "vector":
                y = _matvec(A, w_a)
                s = _sum1(y)
                logr_a = logr_a + np.log(s)
                w_a = y / s[:, None]
                level = logr_a
            else:
                logs_a, dirs_a = update_bundle(logs_a, dirs_a, A)
                level = _max1(logs_a)
            hit = alive & (level <= thresh)
            if hit.any():
                tau[active[hit]] = done + t + 1
                alive &= ~hit
            if not alive.any():
                break
        if mode == "vector":
            w[active], logr[active] = w_a, logr_a
        else:
            logs[active], dirs[active] = logs_a, dirs_a
        active = active[alive]
        done += c
    return tau


def ladder_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    a: float,
    k_max: int,
    cap: int,
    x0: np.ndarray | None = None,
    store_blocks: bool = False,
    chunk: int | None = None,
) -> dict:
    """Successive norm-drop epochs and the induced block variables.

    Block l spans steps tau_{l-1}+1 .. tau_l where tau_l is the first n
    with a * |A_{n, tau_{l-1}+1}| <= 1.  Returns per-path block times, log
    block norms, ln(1 + |block shift|) samples, the running product norm
    at the last closed block, and (optionally, single path) the block
    matrices and shift vectors themselves.
    """
    d = law.dim
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]
    thresh = -np.log(a) + STOP_TOL

    times = np.zeros((n_paths, k_max), dtype=np.int64)
    block_log_norm = np.zeros((n_paths, k_max))
    block_log1p_shift = np.zeros((n_paths, k_max))
    blocks_done = np.zeros(n_paths, dtype=np.int64)
    truncated = np.zeros(n_paths, dtype=bool)
    global_log_norm = np.zeros(n_paths)  # ln |product of closed blocks|

    logs_blk, dirs_blk = _identity_bundle(n_paths, d)
    # running block shift accumulation, kept as (log radius, direction):
    # intermediate values pass through the peaks of the product walk and
    # overflow linear storage on long blocks, even though the value at the
    # block close is bounded by block length * max|B| / delta
    v_log = np.full(n_paths, -np.inf)
    v_dir = np.full((n_paths, d), 1.0 / d)

    track_state = x0 is not None
    if track_state:
        x0 = np.asarray(x0, dtype=np.float64)
        r0 = x0.sum()
        u = np.full(n_paths, np.log(r0) if r0 > 0 else -np.inf)
        w = np.broadcast_to(x0 / r0 if r0 > 0 else np.full(d, 1.0 / d), (n_paths, d)).copy()
        u_at_last, w_at_last = u.copy(), w.copy()

    if store_blocks:
        mats_store = [[] for _ in range(n_paths)]
        shifts_store = [[] for _ in range(n_paths)]

    eye = np.eye(d)
    active = np.arange(n_paths)
    c_max = _chunk_steps(law, n_paths, chunk)
    done = 0
    while active.size and done < cap:
        c = min(c_max, cap - done)
        draws = _BlockDraws(law, gens, active, c)
        alive = np.ones(active.size, dtype=bool)
        lg, dr = logs_blk[active], dirs_blk[active]
        vl, vd = v_log[active], v_dir[active]
        if track_state:
            ua, wa = u[active], w[active]
        for t in range(c):
            A, b = draws.step(t)
            lg, dr = update_bundle(lg, dr, A)
            vl, vd = advance_state(vl, vd, A, b)
            if track_state:
                ua, wa = advance_state(ua, wa, A, b)
            blk_max = _max1(lg)
            closing = alive & (blk_max <= thresh)
            if closing.any():
                rows = active[closing]
                k = blocks_done[rows]
                times[rows, k] = done + t + 1
                block_log_norm[rows, k] = blk_max[closing]
                block_log1p_shift[rows, k] = np.logaddexp(0.0, vl[closing])
                global_log_norm[rows] += blk_max[closing]
                if store_blocks:
                    for r, li in zip(rows, np.flatnonzero(closing)):
                        mats_store[r].append(dr[li] * np.exp(lg[li])[None, :])
                        shifts_store[r].append(np.exp(vl[li]) * vd[li])
                if track_state:
                    u_at_last[rows], w_at_last[rows] = ua[closing], wa[closing]
                blocks_done[rows] += 1
                lg[closing] = 0.0
                dr[closing] = eye
                vl[closing] = -np.inf
                vd[closing] = 1.0 / d
                finished = blocks_done[rows] >= k_max
                if finished.any():
                    closing_idx = np.flatnonzero(closing)
                    alive[closing_idx[finished]] = False
            if not alive.any():
                break
        logs_blk[active], dirs_blk[active] = lg, dr
        v_log[active], v_dir[active] = vl, vd
        if track_state:
            u[active], w[active] = ua, wa
        active = active[alive]
        done += c
    truncated[blocks_done < k_max] = True

    out = {
        "times": times,
        "block_log_norm": block_log_norm,
        "block_log1p_shift": block_log1p_shift,
        "blocks_done": blocks_done,
        "truncated": truncated,
        "product_log_norm": global_log_norm,
    }
    if track_state:
        out["final_log_radius"] = u_at_last
        out["final_direction"] = w_at_last
    if store_blocks:
        out["block_matrices"] = mats_store
        out["block_shifts"] = shifts_store
    return out


def vector_log_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    n_steps: int,
    snapshots: tuple,
    x0: np.ndarray,
    chunk: int | None = None,
) -> np.ndarray:
    """ln |A_{n,1} x| at the requested steps, shape (n_paths, len(snapshots))."""
    d = law.dim
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]
    x0 = np.asarray(x0, dtype=np.float64)
    w = np.broadcast_to(x0 / x0.sum(), (n_paths, d)).copy()
    logr = np.zeros(n_paths)
    snapshots = sorted(snapshots)
    out = np.empty((n_paths, len(snapshots)))
    si = 0
    c_max = _chunk_steps(law, n_paths, chunk)
    done = 0
    while done < n_steps:
        c = min(c_max, n_steps - done)
        draws = _BlockDraws(law, gens, np.arange(n_paths), c)
        for t in range(c):
            A, _ = draws.step(t)
            y = _matvec(A, w)
            s = _sum1(y)
            logr += np.log(s)
            w = y / s[:, None]
            while si < len(snapshots) and snapshots[si] == done + t + 1:
                out[:, si] = logr
                si += 1
        done += c
    return out


def product_log_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    n_steps: int,
    chunk: int | None = None,
) -> np.ndarray:
    """ln |A_{n,1}| after n_steps left multiplications, shape (n_paths,)."""
    d = law.dim
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]
    logs, dirs = _identity_bundle(n_paths, d)
    c_max = _chunk_steps(law, n_paths, chunk)
    done = 0
    while done < n_steps:
        c = min(c_max, n_steps - done)
        draws = _BlockDraws(law, gens, np.arange(n_paths), c)
        for t in range(c):
            A, _ = draws.step(t)
            logs, dirs = update_bundle(logs, dirs, A)
        done += c
    return _max1(logs)


def pair_distance_block(
    law: CompiledLaw,
    seed: int,
    first_index: int,
    n_paths: int,
    n_steps: int,
    x0: np.ndarray,
    y0: np.ndarray,
) -> np.ndarray:
    """Projective distance between the images of two starts along shared products.

    Returns shape (n_paths, n_steps): distance after each left factor.
    """
    from .metric import batch_distance

    d = law.dim
    gens = [stream(seed, TRAJECTORY, first_index + i) for i in range(n_paths)]
    wx = np.broadcast_to(np.asarray(x0, float) / np.sum(x0), (n_paths, d)).copy()
    wy = np.broadcast_to(np.asarray(y0, float) / np.sum(y0), (n_paths, d)).copy()
    out = np.empty((n_paths, n_steps))
    c_max = _chunk_steps(law, n_paths)
    done = 0
    while done < n_steps:
        c = min(c_max, n_steps - done)
        draws = _BlockDraws(law, gens, np.arange(n_paths), c)
        for t in range(c):
            A, _ = draws.step(t)
            yx = _matvec(A, wx)
            wx = yx / _sum1(yx)[:, None]
            yy = _matvec(A, wy)
            wy = yy / _sum1(yy)[:, None]
            out[:, done + t] = batch_distance(wx, wy)
        done += c
    return out
