"""Report writers: JSON summaries, CSV data files, and matplotlib figures.

Payload files (JSON + CSV) are byte-deterministic for a fixed seed and
worker count: keys are sorted, floats use repr, and anything
time-dependent goes to the separate run_meta.json.  Figures are rendered
to PNG with the Agg backend alongside the delimited output.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

__all__ = [
    "write_json",
    "write_csv",
    "write_run_meta",
    "fig_survival",
    "fig_clt",
    "fig_radial_profile",
    "fig_tail",
    "fig_contractivity",
    "fig_ladder",
    "fig_lyapunov",
]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)  # JSON has no inf/nan; keep them readable
    return obj


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _format_cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_format_cell(v) for v in row) + "\n")


def write_run_meta(out_dir, meta: dict) -> None:
    """Timestamps, versions and wall times live here, outside the payloads."""
    write_json(Path(out_dir) / "run_meta.json", meta)


def _import_pyplot():
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    import matplotlib.pyplot as plt

    plt.close(fig)


def fig_survival(curves, fits, path) -> None:
    """Log-log survival curves with their 1/sqrt(n) envelopes."""
    plt = _import_pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    for curve, fit in zip(curves, fits):
        sel = curve.survival > 0
        (line,) = ax.loglog(
            curve.grid[sel], curve.survival[sel], ".", ms=3,
            label=f"a={curve.a:g} ({curve.mode})",
        )
        if fit is not None:
            n = np.asarray(curve.grid, dtype=float)
            env = fit.kappa_hat * (1.0 + np.log(curve.a)) / np.sqrt(n)
            ax.loglog(n, env, "--", lw=0.8, color=line.get_color())
    ax.set_xlabel("n")
    ax.set_ylabel("P(tau > n)")
    ax.legend(fontsize=8)
    ax.set_title("survival of norm stopping times")
    _save(fig, path)


def fig_clt(samples, report, path) -> None:
    plt = _import_pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.hist(samples, bins=60, density=True, alpha=0.6, label="ln|A_n1|/sqrt(n)")
    if report.var_hat > 0:
        x = np.linspace(samples.min(), samples.max(), 300)
        pdf = np.exp(-0.5 * x**2 / report.var_hat) / math.sqrt(2 * math.pi * report.var_hat)
        ax.plot(x, pdf, "k-", lw=1.2, label=f"N(0, {report.var_hat:.3g})")
    ax.set_xlabel("normalized log norm")
    ax.set_ylabel("density")
    ax.legend(fontsize=8)
    ax.set_title(f"CLT check, n={report.n}, KS={report.ks_stat:.4f}")
    _save(fig, path)


def fig_radial_profile(hist, path) -> None:
    plt = _import_pyplot()
    masses = hist.normalized_radial_masses()
    err = hist.radial_stderr()
    k = hist.k_values()
    sel = masses > 0
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.errorbar(k[sel], masses[sel], yerr=np.where(np.isfinite(err[sel]), err[sel], 0.0),
                fmt=".", ms=3, lw=0.6)
    ax.set_yscale("log")
    ax.set_xlabel("log2 radius bin")
    ax.set_ylabel("normalized annulus mass")
    ax.set_title("invariant measure, radial profile")
    _save(fig, path)


def fig_tail(tail, path) -> None:
    plt = _import_pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(11.0, 3.6))
    sel = tail.L_hat > 0
    axes[0].semilogy(tail.t_log2_grid[sel], tail.L_hat[sel], ".-", ms=3, lw=0.7)
    axes[0].set_xlabel("log2 t")
    axes[0].set_ylabel("L(t)")
    axes[0].set_title("reference-window mass")
    for s, ratios in tail.ratio_s.items():
        ok = np.isfinite(ratios)
        axes[1].plot(tail.t_log2_grid[ok], ratios[ok], ".-", ms=3, lw=0.7, label=f"s={s:g}")
    axes[1].axhspan(0.7, 1.4, color="0.9")
    axes[1].axhline(1.0, color="k", lw=0.6)
    axes[1].set_xlabel("log2 t")
    axes[1].set_ylabel("L(st)/L(t)")
    axes[1].legend(fontsize=8)
    axes[1].set_title("slow variation")
    axes[2].plot(tail.cumulative_k, tail.cumulative_mass, ".-", ms=3, lw=0.7)
    axes[2].set_xlabel("log2 radius")
    axes[2].set_ylabel("cumulative mass")
    axes[2].set_title("mass growth")
    fig.tight_layout()
    _save(fig, path)


def fig_contractivity(report, path) -> None:
    plt = _import_pyplot()
    med = report.contraction_half_medians
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.8))
    finite = np.isfinite(med).all(axis=1)
    axes[0].plot(med[finite, 0], med[finite, 1], ".", ms=3, alpha=0.5)
    lims = axes[0].get_xlim()
    axes[0].plot(lims, lims, "k-", lw=0.7)
    axes[0].set_xlabel("median log diff, first half")
    axes[0].set_ylabel("median log diff, second half")
    axes[0].set_title("paired-trajectory contraction")
    if report.bernoulli_checkpoints is not None:
        bc = report.bernoulli_checkpoints
        steps = report.bernoulli_steps
        for row in bc[: min(len(bc), 200)]:
            axes[1].loglog(steps, np.maximum(row, 1), "-", lw=0.3, alpha=0.3, color="C0")
        axes[1].set_xlabel("n")
        axes[1].set_ylabel("divergent Bernoulli sum")
        axes[1].set_title("divergence observer")
    fig.tight_layout()
    _save(fig, path)


def fig_ladder(block_log_norm, block_log1p_shift, a, path) -> None:
    plt = _import_pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.8))
    for k in range(min(block_log_norm.shape[1], 2)):
        axes[0].hist(block_log_norm[:, k], bins=50, alpha=0.5, label=f"block {k + 1}")
    axes[0].axvline(-math.log(a), color="k", lw=0.8)
    axes[0].set_xlabel("ln |block matrix|")
    axes[0].legend(fontsize=8)
    axes[0].set_title("block norm law across indices")
    running = np.cumsum(block_log1p_shift[:, 0]) / np.arange(1, len(block_log1p_shift) + 1)
    axes[1].semilogx(np.arange(1, len(running) + 1), running, lw=0.8)
    axes[1].set_xlabel("blocks")
    axes[1].set_ylabel("running mean ln(1+|shift|)")
    axes[1].set_title("block shift log-moment")
    fig.tight_layout()
    _save(fig, path)


def fig_lyapunov(per_rep, gamma, ci, path) -> None:
    plt = _import_pyplot()
    fig, ax = plt.subplots(figsize=(6.0, 4.2))
    ax.hist(per_rep, bins=40, alpha=0.7)
    ax.axvline(gamma, color="k", lw=1.0, label=f"gamma = {gamma:.3e}")
    ax.axvline(gamma - ci, color="k", lw=0.6, ls="--")
    ax.axvline(gamma + ci, color="k", lw=0.6, ls="--", label=f"ci = {ci:.2e}")
    ax.set_xlabel("per-replica exponent")
    ax.legend(fontsize=8)
    ax.set_title("Lyapunov exponent estimate")
    _save(fig, path)
