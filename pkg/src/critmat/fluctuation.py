"""Fluctuation statistics of matrix-product stopping times: empirical
survival curves, the 1/sqrt(n) tail envelope, and the CLT normalization
of log product norms underlying it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from .ensemble import EnsembleSpec
from .simulate import stopping_times, product_log_norms

__all__ = [
    "SurvivalCurve",
    "TailFit",
    "CltReport",
    "survival_curve",
    "sqrt_tail_fit",
    "clt_check",
    "DEFAULT_FIT_RANGE",
]

# Below 1e2 the tail is pre-asymptotic, above 1e4 desk-scale cost dominates.
DEFAULT_FIT_RANGE = (100.0, 10_000.0)


@dataclass
class SurvivalCurve:
    """Empirical P(tau > n) on a grid, with binomial standard errors.

    Paths that outlive ``cap`` are right-censored: they count as tau > n
    for every grid point n <= cap (no bias there) and are reported in
    ``censored_fraction``.
    """

    mode: str
    a: float
    grid: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    reps: int
    cap: int
    censored_fraction: float
    x0: np.ndarray | None = None

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(self.grid > self.cap):
            raise ValueError("grid extends beyond the cap; survival there is unknown")


def survival_curve(
    spec: EnsembleSpec,
    mode: str,
    a: float,
    grid,
    reps: int,
    cap: int,
    seed: int,
    x=None,
    first_index: int = 0,
    gamma_hint: float | None = None,
) -> SurvivalCurve:
    """Empirical survival of the stopping time over ``reps`` paths.

    The vector-mode curve lies below the norm-mode curve pointwise on
    shared seeds.  ``gamma_hint`` lets callers pass a known exponent so an
    uncalibrated ensemble triggers a warning instead of silent nonsense.
    """
    if reps < 1000:
        raise ValueError(f"reps must be at least 1000, got {reps}")
    if gamma_hint is not None and abs(gamma_hint) > 1e-3:
        warnings.warn(
            f"ensemble exponent {gamma_hint:.2e} above 1e-3; survival tails "
            "will mix drift into the fluctuation scale",
            stacklevel=2,
        )
    grid = np.asarray(sorted(set(int(n) for n in grid)), dtype=np.int64)
    tau, exceeded = stopping_times(
        spec, mode, a, cap, seed, x=x, paths=reps, first_index=first_index
    )
    surv = (tau[None, :] > grid[:, None]).mean(axis=1)
    stderr = np.sqrt(surv * (1.0 - surv) / reps)
    return SurvivalCurve(
        mode=mode,
        a=a,
        grid=grid,
        survival=surv,
        stderr=stderr,
        reps=reps,
        cap=cap,
        censored_fraction=float(exceeded.mean()),
        x0=None if x is None else np.asarray(x, float),
    )


@dataclass
class TailFit:
    """Least-squares tail exponent and the observed envelope constant.

    kappa_hat is the largest P(tau > n) * sqrt(n) / (1 + ln a) over the
    fitted range: by construction the curve sits below kappa_hat *
    (1 + ln a) / sqrt(n) everywhere on the grid.  envelope_ok reports
    whether kappa_hat is stable within a factor 2 across companion curves
    (the (1 + ln a) scaling test); with no companions it is trivially
    true.  ``voided`` flags a censored fraction above 20%.
    """

    slope: float
    kappa_hat: float
    envelope_ok: bool
    voided: bool
    n_points: int
    fit_range: tuple[float, float]
    kappa_by_a: dict = field(default_factory=dict)


def _kappa_hat(curve: SurvivalCurve, fit_range) -> tuple[float, np.ndarray]:
    lo, hi = fit_range
    sel = (curve.grid >= lo) & (curve.grid <= hi) & (curve.survival > 0)
    kappa = float(
        np.max(curve.survival[sel] * np.sqrt(curve.grid[sel]) / (1.0 + math.log(curve.a)))
    )
    return kappa, sel


def sqrt_tail_fit(
    curve: SurvivalCurve,
    companions=(),
    fit_range: tuple[float, float] = DEFAULT_FIT_RANGE,
) -> TailFit:
    """Log-log slope of the survival tail plus the envelope constant.

    Degenerate curves (survival identically 0 or 1 on the fit range) are
    rejected; censoring above 20% voids the fit with a warning flag.
    """
    lo, hi = fit_range
    if hi / max(lo, 1.0) < 100.0:
        raise ValueError("fit range must span at least two decades")
    sel = (curve.grid >= lo) & (curve.grid <= hi)
    if not sel.any():
        raise ValueError("no grid points inside the fit range")
    surv = curve.survival[sel]
    if np.all(surv <= 0) or np.all(surv >= 1):
        raise ValueError("degenerate survival curve; tail fit is meaningless")
    pos = sel & (curve.survival > 0)
    slope = float(
        np.polyfit(np.log(curve.grid[pos]), np.log(curve.survival[pos]), 1)[0]
    )
    kappa, _ = _kappa_hat(curve, fit_range)
    voided = curve.censored_fraction > 0.20
    if voided:
        warnings.warn(
            f"censored fraction {curve.censored_fraction:.1%} exceeds 20%; "
            "tail fit voided",
            stacklevel=2,
        )
    kappa_by_a = {curve.a: kappa}
    for comp in companions:
        kappa_by_a[comp.a], _ = _kappa_hat(comp, fit_range)
    kappas = list(kappa_by_a.values())
    envelope_ok = (
        not voided
        and all(math.isfinite(k) and k > 0 for k in kappas)
        and max(kappas) <= 2.0 * min(kappas)
    )
    return TailFit(
        slope=slope,
        kappa_hat=kappa,
        envelope_ok=envelope_ok,
        voided=voided,
        n_points=int(pos.sum()),
        fit_range=(float(lo), float(hi)),
        kappa_by_a=kappa_by_a,
    )


@dataclass
class CltReport:
    """Distribution of ln|A_{n,1}| / sqrt(n) across replicas.

    ``mean_ok`` holds when the mean sits within 3 standard errors of 0;
    a clearly nonzero mean warns that the ensemble is off criticality.
    ``ks_stat`` is the Kolmogorov-Smirnov distance to the centered
    Gaussian with the fitted variance (NaN for degenerate samples).
    """

    n: int
    reps: int
    mean_norm: float
    var_hat: float
    ks_stat: float
    mean_ok: bool
    degenerate: bool
    criticality_warning: bool


def clt_check(spec: EnsembleSpec, n: int, reps: int, seed: int, first_index: int = 0) -> CltReport:
    """CLT normalization check for the log norm of products at horizon n."""
    if n < 1000:
        raise ValueError(f"n must be at least 1000, got {n}")
    if reps < 1000:
        raise ValueError(f"reps must be at least 1000, got {reps}")
    samples = product_log_norms(spec, n, reps, seed, first_index=first_index) / math.sqrt(n)
    mean = float(samples.mean())
    var = float(samples.var(ddof=1))
    degenerate = var < 1e-24
    if degenerate:
        ks = float("nan")
    else:
        ks = float(sps.kstest(samples, sps.norm(loc=0.0, scale=math.sqrt(var)).cdf).statistic)
    se = math.sqrt(var / reps) if var > 0 else 0.0
    mean_ok = abs(mean) <= 3.0 * se
    warn = not mean_ok
    if warn:
        warnings.warn(
            f"mean of ln|A_n1|/sqrt(n) = {mean:.3e} is {abs(mean) / se if se else math.inf:.1f} "
            "standard errors from 0; ensemble looks off-critical",
            stacklevel=2,
        )
    return CltReport(
        n=n,
        reps=reps,
        mean_norm=mean,
        var_hat=var,
        ks_stat=ks,
        mean_ok=mean_ok,
        degenerate=degenerate,
        criticality_warning=warn,
    )
