"""Occupation-based estimation of the invariant Radon measure and its
radial tail diagnostics.

The chain is null recurrent in the critical regime, so raw occupation
counts diverge; their ratios converge to ratios of the invariant measure.
Normalizing by the count in a fixed reference annulus therefore estimates
the measure up to its one free multiplicative constant (the measure is
unique only up to scale).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .engine import RadialBinning, n_direction_cells
from .ensemble import EnsembleSpec
from .simulate import run_trajectory

__all__ = [
    "HistogramConfig",
    "OccupationHistogram",
    "TailReport",
    "UniquenessReport",
    "estimate_invariant_measure",
    "tail_diagnostics",
    "uniqueness_check",
]


@dataclass(frozen=True)
class HistogramConfig:
    """Binning for occupation statistics.

    Radial bins are uniform in ln|x| (default width ln 2: dyadic annuli);
    the reference window is the annulus 1/ref_radius <= |x| <= ref_radius.
    Direction cells are the coarse nearest-vertex buckets (d(d-1) + 1
    cells); the radial marginal carries all acceptance checks.
    """

    log_radius_bin_width: float = float(np.log(2.0))
    k_lo: int = -128
    k_hi: int = 4400
    ref_radius: float = 2.0
    n_batches: int = 20

    def binning(self) -> RadialBinning:
        return RadialBinning(
            width=self.log_radius_bin_width,
            k_lo=self.k_lo,
            k_hi=self.k_hi,
            n_batches=self.n_batches,
        )

    def ref_bin_mask(self) -> np.ndarray:
        """Radial bins wholly inside the reference annulus.

        With width ln 2 and ref_radius 2 these are the two dyadic annuli
        [1/2, 1) and [1, 2); the boundary |x| = 2 itself falls in the next
        bin (a set the invariant measure does not charge).
        """
        k = np.arange(self.k_lo, self.k_hi)
        lo_edge = k * self.log_radius_bin_width
        hi_edge = (k + 1) * self.log_radius_bin_width
        lim = math.log(self.ref_radius)
        return (lo_edge >= -lim - 1e-12) & (hi_edge <= lim + 1e-12)


@dataclass
class OccupationHistogram:
    """Occupation counts over (radial bin, direction cell) with reference
    normalization; mergeable across trajectories (counts add per bin).

    ``batch_radial`` splits the radial counts into n_batches time slices;
    per-bin standard errors come from the across-batch spread of the
    batch ratios, which respects the heavy autocorrelation of occupation
    samples where i.i.d. formulas would not.
    """

    config: HistogramConfig
    dim: int
    counts: np.ndarray          # (n_rad, n_dir) int64
    batch_radial: np.ndarray    # (n_batches, n_rad) int64
    total_steps: int
    out_of_range: int
    # rebinned copies keep the parent's reference count so normalized
    # masses stay on the same scale even when the reference window no
    # longer aligns with the coarser bins
    ref_count_override: int | None = None

    @property
    def radial_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def ref_count(self) -> int:
        if self.ref_count_override is not None:
            return self.ref_count_override
        return int(self.radial_counts[self.config.ref_bin_mask()].sum())

    def k_values(self) -> np.ndarray:
        return np.arange(self.config.k_lo, self.config.k_hi)

    def normalized_radial_masses(self) -> np.ndarray:
        """Per-annulus measure estimates relative to the reference annulus."""
        ref = self.ref_count
        if ref == 0:
            raise ValueError(
                "reference annulus never visited; enlarge ref_radius or run longer"
            )
        return self.radial_counts / ref

    def radial_stderr(self) -> np.ndarray:
        """Batch-means standard error of the normalized radial masses."""
        ref_mask = self.config.ref_bin_mask()
        ref_per_batch = self.batch_radial[:, ref_mask].sum(axis=1)
        ok = ref_per_batch > 0
        nb = int(ok.sum())
        if nb < 2:
            return np.full(self.counts.shape[0], np.nan)
        ratios = self.batch_radial[ok] / ref_per_batch[ok, None]
        # batches cover equal time slices, so the plain across-batch spread
        # of the per-batch ratios estimates the error of their mean
        return ratios.std(axis=0, ddof=1) / math.sqrt(nb)

    def normalized_cell_masses(self) -> np.ndarray:
        ref = self.ref_count
        if ref == 0:
            raise ValueError("reference annulus never visited")
        return self.counts / ref

    def merge(self, other: "OccupationHistogram") -> "OccupationHistogram":
        if other.config != self.config or other.dim != self.dim:
            raise ValueError("histograms with different configurations cannot merge")
        return OccupationHistogram(
            config=self.config,
            dim=self.dim,
            counts=self.counts + other.counts,
            batch_radial=self.batch_radial + other.batch_radial,
            total_steps=self.total_steps + other.total_steps,
            out_of_range=self.out_of_range + other.out_of_range,
        )

    def rebin_coarser(self, factor: int) -> "OccupationHistogram":
        """Aggregate radial bins in groups of ``factor`` (pure aggregation;
        total mass is preserved exactly)."""
        if factor < 1:
            raise ValueError("factor must be >= 1")
        if self.config.k_lo % factor:
            raise ValueError("k_lo must be divisible by the rebin factor")
        n_rad = self.counts.shape[0]
        usable = (n_rad // factor) * factor
        counts = self.counts[:usable].reshape(-1, factor, self.counts.shape[1]).sum(axis=1)
        batches = self.batch_radial[:, :usable].reshape(
            self.batch_radial.shape[0], -1, factor
        ).sum(axis=2)
        cfg = replace(
            self.config,
            log_radius_bin_width=self.config.log_radius_bin_width * factor,
            k_lo=self.config.k_lo // factor,
            k_hi=self.config.k_lo // factor + counts.shape[0],
        )
        return OccupationHistogram(
            config=cfg,
            dim=self.dim,
            counts=counts,
            batch_radial=batches,
            total_steps=self.total_steps,
            out_of_range=self.out_of_range,
            ref_count_override=self.ref_count,
        )

    def to_csv_rows(self):
        """Rows (log2_radius_lo, log2_radius_hi, direction_cell, count,
        normalized_mass, stderr) for every populated cell."""
        ref = self.ref_count
        rad_err = self.radial_stderr()
        rows = []
        w = self.config.log_radius_bin_width / math.log(2.0)
        for ki, k in enumerate(self.k_values()):
            row_total = self.radial_counts[ki]
            if row_total == 0:
                continue
            for cell in range(self.counts.shape[1]):
                cnt = int(self.counts[ki, cell])
                if cnt == 0:
                    continue
                share = cnt / row_total
                rows.append(
                    (
                        k * w,
                        (k + 1) * w,
                        cell,
                        cnt,
                        cnt / ref if ref else math.nan,
                        rad_err[ki] * share if math.isfinite(rad_err[ki]) else math.nan,
                    )
                )
        return rows


def estimate_invariant_measure(
    spec: EnsembleSpec,
    x0,
    n_steps: int,
    config: HistogramConfig | None = None,
    seed: int = 0,
    path_index: int = 0,
) -> OccupationHistogram:
    """Occupation histogram of one trajectory, reference-normalized.

    Requires a conservative (calibrated) ensemble and n_steps >= 1e5;
    raises if the reference annulus is never visited.
    """
    if n_steps < 10**5:
        raise ValueError(f"n_steps must be at least 1e5, got {n_steps}")
    config = config or HistogramConfig()
    rep = run_trajectory(
        spec,
        x0,
        n_steps,
        observers={"occupation"},
        seed=seed,
        paths=1,
        first_index=path_index,
        binning=config.binning(),
    )
    hist = OccupationHistogram(
        config=config,
        dim=spec.dim,
        counts=rep.occupation_counts[0],
        batch_radial=rep.occupation_batch_radial[0],
        total_steps=n_steps,
        out_of_range=int(rep.occupation_out_of_range[0]),
    )
    if hist.ref_count == 0:
        raise ValueError(
            "reference annulus never visited; enlarge ref_radius or run longer"
        )
    return hist


@dataclass
class TailReport:
    """Radial tail diagnostics of an estimated invariant measure.

    ``L_hat`` estimates t -> m(t * reference annulus) over the dyadic
    t-grid; slow variation predicts ratios L(st)/L(t) -> 1.  ``c_hat`` is
    the largest band-to-L ratio over the grid (the two-sided sandwich
    constant); ``cumulative_mass`` should grow without bound for an
    infinite-mass measure (trend flag, not a certificate).
    """

    t_log2_grid: np.ndarray
    L_hat: np.ndarray
    ratio_s: dict
    slow_variation_pass: bool
    c_hat: float
    c_stable: bool
    band: tuple[float, float]
    cumulative_k: np.ndarray
    cumulative_mass: np.ndarray
    strictly_increasing: bool
    unbounded_trend: bool


def _annulus_mass(masses: np.ndarray, k_values: np.ndarray, lo_ln: float, hi_ln: float, width: float) -> float:
    """Mass of ln|x| in [lo_ln, hi_ln) from per-bin masses (bin-aligned)."""
    sel = (k_values * width >= lo_ln - 1e-12) & ((k_values + 1) * width <= hi_ln + 1e-12)
    return float(masses[sel].sum())


def tail_diagnostics(
    hist: OccupationHistogram,
    s_values=(0.5, 2.0),
    t_log2_grid=None,
    band: tuple[float, float] = (0.5, 2.0),
) -> TailReport:
    """Slow-variation and sandwich diagnostics on the radial tail.

    Needs at least 10 populated annuli.  The pass criteria are trend
    tests over the top half of the populated grid (ratios within
    [0.7, 1.4]); finite runs cannot certify limits.
    """
    masses = hist.normalized_radial_masses()
    k_values = hist.k_values()
    w = hist.config.log_radius_bin_width
    populated = k_values[masses > 0]
    if populated.size < 10:
        raise ValueError(f"only {populated.size} populated annuli; need >= 10")
    lim = math.log(hist.config.ref_radius)

    if t_log2_grid is None:
        # dyadic t over the populated range, staying inside it
        t_log2_grid = np.arange(populated.min() + 1, populated.max())
    t_log2_grid = np.asarray(t_log2_grid, dtype=np.int64)

    def L_at(k_log2: np.ndarray) -> np.ndarray:
        # L(t) = mass{ t/R <= |x| <= tR } with t = 2^k
        return np.array(
            [
                _annulus_mass(masses, k_values, k * math.log(2.0) - lim, k * math.log(2.0) + lim, w)
                for k in k_log2
            ]
        )

    L = L_at(t_log2_grid)
    pos = L > 0
    top_half = t_log2_grid >= np.median(t_log2_grid[pos]) if pos.any() else pos

    ratio_s = {}
    sv_ok = True
    for s in s_values:
        shift = math.log2(s)
        if abs(shift - round(shift)) > 1e-9:
            raise ValueError(f"s values must be powers of 2 for the dyadic grid, got {s}")
        Ls = L_at(t_log2_grid + int(round(shift)))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(L > 0, Ls / np.where(L > 0, L, 1.0), np.nan)
        ratio_s[s] = ratios
        sel = top_half & np.isfinite(ratios)
        if sel.any():
            sv_ok &= bool(np.all((ratios[sel] >= 0.7) & (ratios[sel] <= 1.4)))
        else:
            sv_ok = False

    a_band, b_band = band
    band_mass = np.array(
        [
            _annulus_mass(
                masses,
                k_values,
                k * math.log(2.0) + math.log(a_band),
                k * math.log(2.0) + math.log(b_band),
                w,
            )
            for k in t_log2_grid
        ]
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        c_ratios = np.where(L > 0, band_mass / np.where(L > 0, L, 1.0), np.nan)
    sel = top_half & np.isfinite(c_ratios) & (c_ratios > 0)
    if sel.any():
        c_hat = float(np.nanmax(c_ratios[pos]))
        c_stable = bool(np.nanmax(c_ratios[sel]) <= 2.0 * np.nanmin(c_ratios[sel]))
    else:
        c_hat, c_stable = math.nan, False

    cum_k = np.arange(populated.min(), populated.max() + 1)
    cum_sel = [k_values <= k for k in cum_k]
    cumulative = np.array([float(masses[s].sum()) for s in cum_sel])
    increments = np.diff(np.concatenate([[0.0], cumulative]))
    pop_mask = np.isin(cum_k, populated)
    strictly_incr = bool(np.all(increments[pop_mask] > 0))
    mid = cumulative[len(cumulative) // 2]
    unbounded = bool(cumulative[-1] >= 1.2 * mid) if mid > 0 else False

    return TailReport(
        t_log2_grid=t_log2_grid,
        L_hat=L,
        ratio_s=ratio_s,
        slow_variation_pass=sv_ok,
        c_hat=c_hat,
        c_stable=c_stable,
        band=band,
        cumulative_k=cum_k,
        cumulative_mass=cumulative,
        strictly_increasing=strictly_incr,
        unbounded_trend=unbounded,
    )


@dataclass
class UniquenessReport:
    """Pairwise total-variation distances between window-restricted
    normalized histograms from independent runs."""

    tv_matrix: np.ndarray
    passed: bool
    window_log2: tuple[int, int]
    labels: list


def _window_distribution(hist: OccupationHistogram, k_lo: int, k_hi: int) -> np.ndarray:
    k_values = hist.k_values()
    sel = (k_values >= k_lo) & (k_values < k_hi)
    cells = hist.counts[sel].astype(np.float64).ravel()
    total = cells.sum()
    if total == 0:
        raise ValueError("common window never visited in one of the runs")
    return cells / total


def uniqueness_check(
    spec: EnsembleSpec,
    x0_list,
    n_steps: int,
    seeds,
    config: HistogramConfig | None = None,
    tv_threshold: float = 0.1,
    window_log2: tuple[int, int] = (-3, 3),
) -> tuple[UniquenessReport, list]:
    """Occupation ratios from different starts and seeds must agree.

    Runs one trajectory per (x0, seed) combination, restricts each
    normalized histogram to the common window (radii 2^k for k in
    ``window_log2``), and compares all pairs in total variation.
    """
    if len(x0_list) < 2:
        raise ValueError("need at least 2 starting points")
    config = config or HistogramConfig()
    runs = []
    labels = []
    idx = 0
    for x0 in x0_list:
        for seed in seeds:
            runs.append(
                estimate_invariant_measure(
                    spec, x0, n_steps, config, seed=seed, path_index=idx
                )
            )
            labels.append({"x0": list(np.asarray(x0, float)), "seed": int(seed)})
            idx += 1
    dists = [_window_distribution(h, *window_log2) for h in runs]
    m = len(runs)
    tv = np.zeros((m, m))
    for i in range(m):
        for j in range(i + 1, m):
            tv[i, j] = tv[j, i] = 0.5 * float(np.abs(dists[i] - dists[j]).sum())
    report = UniquenessReport(
        tv_matrix=tv,
        passed=bool(np.all(tv <= tv_threshold)),
        window_log2=window_log2,
        labels=labels,
    )
    return report, runs
