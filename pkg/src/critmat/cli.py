"""Command-line driver.

Every command reads an ensemble spec file, fans path-indexed work out to a
worker pool, and writes a JSON summary plus CSV data files (and PNG
figures) into the output directory.  Payload bytes depend only on (spec,
seed, command parameters): per-path random streams make results identical
for any worker count, and timestamps live in the separate run_meta.json.

Exit codes: 0 success, 2 computed fine but a scientific property failed,
1 errors (malformed spec, bad arguments).
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .engine import stopping_block, product_log_block
from .ensemble import (
    CalibrationError,
    SpecFormatError,
    calibrate_critical,
    check_hypotheses,
    load_spec,
    lyapunov_replicas,
    save_spec,
    spec_from_dict,
    spec_to_dict,
)
from .fluctuation import sqrt_tail_fit, SurvivalCurve
from .measure import HistogramConfig, estimate_invariant_measure, tail_diagnostics, uniqueness_check
from .oracle import first_passage_survival, rank_one_reduce
from .simulate import (
    default_bernoulli_epsilon,
    default_contraction_window,
    harvest_ladder_blocks,
    run_trajectory,
)
from . import report

OK, FAILED_CHECK, ERROR = 0, 2, 1

_BLOCK = 16384  # paths per worker task; fixed so outputs never depend on workers


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; errors are 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(ERROR)


# --- worker tasks (module level so they pickle) ------------------------------

def _task_stopping(spec_dict, seed, first, count, a, cap, mode, x):
    spec = spec_from_dict(spec_dict)
    return stopping_block(spec.compile(), seed, first, count, a, cap, mode, x)


def _task_product(spec_dict, seed, first, count, n):
    spec = spec_from_dict(spec_dict)
    return product_log_block(spec.compile(), seed, first, count, n)


def _task_chain(spec_dict, seed, first, count, x0, n, y0, window, eps, checkpoints):
    spec = spec_from_dict(spec_dict)
    rep = run_trajectory(
        spec, np.asarray(x0), n,
        observers={"conservativity", "contractivity", "bernoulli"},
        seed=seed, paths=count, first_index=first, y0=np.asarray(y0),
        contraction_window=window, bernoulli_epsilon=eps, checkpoints=tuple(checkpoints),
    )
    return rep


def _task_ladder(spec_dict, seed, first, count, a, k_max, cap):
    spec = spec_from_dict(spec_dict)
    return harvest_ladder_blocks(spec, a, k_max, cap, seed, count, first_index=first)


def _task_measure(spec_dict, seed, path_index, x0, n, cfg_kwargs):
    spec = spec_from_dict(spec_dict)
    return estimate_invariant_measure(
        spec, np.asarray(x0), n, HistogramConfig(**cfg_kwargs), seed=seed, path_index=path_index
    )


def _map_tasks(fn, args_list, workers):
    if workers <= 1 or len(args_list) <= 1:
        return [fn(*args) for args in args_list]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(fn, *args) for args in args_list]
        return [f.result() for f in futures]


def _blocks(total, block=_BLOCK):
    out = []
    first = 0
    while first < total:
        out.append((first, min(block, total - first)))
        first += block
    return out


def _stopping_times_parallel(spec, seed, reps, a, cap, mode, x, workers):
    args = [(spec_to_dict(spec), seed, first, count, a, cap, mode, x) for first, count in _blocks(reps)]
    return np.concatenate(_map_tasks(_task_stopping, args, workers))


def _survival_from_tau(tau, grid, mode, a, reps, cap):
    grid = np.asarray(grid, dtype=np.int64)
    surv = (tau[None, :] > grid[:, None]).mean(axis=1)
    return SurvivalCurve(
        mode=mode, a=a, grid=grid, survival=surv,
        stderr=np.sqrt(surv * (1 - surv) / reps),
        reps=reps, cap=cap, censored_fraction=float((tau > cap).mean()),
    )


# --- argument plumbing -------------------------------------------------------

def _parse_grid(text, cap):
    if text.startswith("log:"):
        _, lo, hi, count = text.split(":")
        pts = np.unique(np.round(np.logspace(math.log10(float(lo)), math.log10(float(hi)), int(count))).astype(np.int64))
    else:
        pts = np.unique(np.asarray([int(v) for v in text.split(",")], dtype=np.int64))
    pts = pts[(pts >= 1) & (pts <= cap)]
    if pts.size == 0:
        raise ValueError(f"grid {text!r} has no points in [1, cap]")
    return pts


def _parse_vector(text):
    return np.asarray([float(v) for v in text.split(",")], dtype=np.float64)


def build_parser() -> _Parser:
    p = _Parser(prog="critmat", description=__doc__)
    p.add_argument("--version", action="version", version=f"critmat {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--spec", required=True, help="ensemble spec JSON file")
        sp.add_argument("--seed", type=int, default=0, help="base seed (env CRITMAT_SEED overrides)")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default="critmat_out", help="output directory")
        sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")

    sp = sub.add_parser("check-hypotheses", help="moment/uniformity/criticality hypothesis report")
    common(sp)
    sp.add_argument("--samples", type=int, default=20000)

    sp = sub.add_parser("estimate-lyapunov", help="Monte Carlo exponent of the matrix law")
    common(sp)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--reps", type=int, default=400)

    sp = sub.add_parser("calibrate", help="rescale the law to zero exponent")
    common(sp)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--reps", type=int, default=400)
    sp.add_argument("--tol", type=float, default=1e-3)

    sp = sub.add_parser("survival", help="stopping-time survival curves and tail fits")
    common(sp)
    sp.add_argument("--mode", choices=["norm", "vector"], default="norm")
    sp.add_argument("--a", type=float, action="append", default=None, help="repeatable")
    sp.add_argument("--reps", type=int, default=100000)
    sp.add_argument("--cap", type=int, default=20000)
    sp.add_argument("--grid", default="log:1:10000:41")
    sp.add_argument("--x0", default=None, help="start direction for vector mode, comma floats")

    sp = sub.add_parser("clt", help="CLT normalization of log product norms")
    common(sp)
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--reps", type=int, default=4000)

    sp = sub.add_parser("ladder", help="norm-drop block decomposition statistics")
    common(sp)
    sp.add_argument("--a", type=float, default=2.0)
    sp.add_argument("--k-max", type=int, default=2)
    sp.add_argument("--paths", type=int, default=10000)
    sp.add_argument("--cap", type=int, default=10**6)

    sp = sub.add_parser("contractivity", help="conservativity / contraction / divergence probes")
    common(sp)
    sp.add_argument("--n", type=int, default=10**6)
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--x0", default="1,0")
    sp.add_argument("--y0", default="0,5")

    sp = sub.add_parser("invariant-measure", help="occupation histogram of the chain")
    common(sp)
    sp.add_argument("--n", type=int, default=10**6)
    sp.add_argument("--x0", default="1,0")
    sp.add_argument("--x0-alt", default=None, help="second start: also run the uniqueness check")
    sp.add_argument("--seeds", default=None, help="comma seeds for the uniqueness runs")

    sp = sub.add_parser("tail-report", help="slow-variation / sandwich / mass-growth diagnostics")
    common(sp)
    sp.add_argument("--n", type=int, default=10**6)
    sp.add_argument("--x0", default="1,0")

    sp = sub.add_parser("oracle-compare", help="DP first-passage oracle vs empirical survival")
    common(sp)
    sp.add_argument("--a", type=float, default=2.0)
    sp.add_argument("--reps", type=int, default=100000)
    sp.add_argument("--n-max", type=int, default=1000)

    return p


# --- commands ----------------------------------------------------------------

def _cmd_check_hypotheses(args, spec, out):
    rep = check_hypotheses(spec, args.samples, args.seed)
    report.write_json(out / "hypotheses.json", {"spec": spec_to_dict(spec), "report": rep.to_dict()})
    return OK if rep.passed else FAILED_CHECK


def _cmd_estimate_lyapunov(args, spec, out):
    per_rep = lyapunov_replicas(spec, args.n, args.reps, args.seed)
    gamma = float(per_rep.mean())
    ci = 1.96 * float(per_rep.std(ddof=1)) / math.sqrt(args.reps) if args.reps > 1 else math.inf
    report.write_json(out / "lyapunov.json", {
        "gamma_hat": gamma, "ci_half_width": ci, "n": args.n, "reps": args.reps,
    })
    report.write_csv(out / "lyapunov_reps.csv", ["rep", "gamma"],
                     [(i, float(g)) for i, g in enumerate(per_rep)])
    if not args.no_figures:
        report.fig_lyapunov(per_rep, gamma, ci, out / "fig_lyapunov.png")
    return OK


def _cmd_calibrate(args, spec, out):
    try:
        res = calibrate_critical(spec, target_tol=args.tol, seed=args.seed, n=args.n, reps=args.reps)
    except CalibrationError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return FAILED_CHECK
    save_spec(res.spec, out / "calibrated_spec.json")
    report.write_json(out / "calibrate.json", {
        "gamma_hat": res.gamma_hat, "ci_half_width": res.ci_half_width,
        "rounds": res.rounds, "scale_multiplier": res.scale_multiplier,
        "scale": res.spec.scale, "a5_pass": res.a5_pass,
        "a5_witness_prob": res.a5_witness_prob,
    })
    if not args.no_figures:
        per_rep = lyapunov_replicas(res.spec, args.n, min(args.reps, 200), args.seed)
        report.fig_lyapunov(per_rep, res.gamma_hat, res.ci_half_width, out / "fig_lyapunov.png")
    return OK


def _cmd_survival(args, spec, out):
    a_values = args.a or [2.0, 8.0, 32.0]
    grid = _parse_grid(args.grid, args.cap)
    x = _parse_vector(args.x0) if args.x0 else None
    if args.mode == "vector" and x is None:
        raise ValueError("vector mode needs --x0")
    curves, fits = [], []
    for a in a_values:
        tau = _stopping_times_parallel(spec, args.seed, args.reps, a, args.cap, args.mode, x, args.workers)
        curves.append(_survival_from_tau(tau, grid, args.mode, a, args.reps, args.cap))
    for i, curve in enumerate(curves):
        fits.append(sqrt_tail_fit(curve, companions=[c for j, c in enumerate(curves) if j != i]))
        report.write_csv(
            out / f"survival_{curve.mode}_a{curve.a:g}.csv",
            ["n", "survival", "stderr"],
            [(int(n), float(s), float(e)) for n, s, e in zip(curve.grid, curve.survival, curve.stderr)],
        )
    report.write_json(out / "survival.json", {
        "mode": args.mode, "reps": args.reps, "cap": args.cap,
        "curves": [
            {
                "a": c.a, "censored_fraction": c.censored_fraction,
                "slope": f.slope, "kappa_hat": f.kappa_hat,
                "envelope_ok": f.envelope_ok, "voided": f.voided,
            }
            for c, f in zip(curves, fits)
        ],
    })
    if not args.no_figures:
        report.fig_survival(curves, fits, out / "fig_survival.png")
    return OK if all(f.envelope_ok and not f.voided for f in fits) else FAILED_CHECK


def _cmd_clt(args, spec, out):
    blocks = _blocks(args.reps, 8192)
    parts = _map_tasks(
        _task_product,
        [(spec_to_dict(spec), args.seed, first, count, args.n) for first, count in blocks],
        args.workers,
    )
    samples = np.concatenate(parts) / math.sqrt(args.n)
    # statistics computed here from the merged samples (keeps parallel and
    # serial paths on the same draws)
    from scipy import stats as sps

    mean = float(samples.mean())
    var = float(samples.var(ddof=1))
    degenerate = var < 1e-24
    ks = float("nan") if degenerate else float(
        sps.kstest(samples, sps.norm(loc=0.0, scale=math.sqrt(var)).cdf).statistic
    )
    se = math.sqrt(var / args.reps) if var > 0 else 0.0
    mean_ok = abs(mean) <= 3.0 * se
    report.write_json(out / "clt.json", {
        "n": args.n, "reps": args.reps, "mean_norm": mean, "var_hat": var,
        "ks_stat": ks, "mean_ok": mean_ok, "degenerate": degenerate,
    })
    report.write_csv(out / "clt_samples.csv", ["rep", "normalized_log_norm"],
                     [(i, float(v)) for i, v in enumerate(samples)])
    if not args.no_figures:
        from .fluctuation import CltReport

        rep = CltReport(n=args.n, reps=args.reps, mean_norm=mean, var_hat=var,
                        ks_stat=ks, mean_ok=mean_ok, degenerate=degenerate,
                        criticality_warning=not mean_ok)
        report.fig_clt(samples, rep, out / "fig_clt.png")
    return OK if (mean_ok and not degenerate) else FAILED_CHECK


def _cmd_ladder(args, spec, out):
    from scipy import stats as sps

    blocks = _blocks(args.paths, 8192)
    parts = _map_tasks(
        _task_ladder,
        [(spec_to_dict(spec), args.seed, first, count, args.a, args.k_max, args.cap)
         for first, count in blocks],
        args.workers,
    )
    done = np.concatenate([p["blocks_done"] for p in parts])
    log_norm = np.concatenate([p["block_log_norm"] for p in parts])
    log1p = np.concatenate([p["block_log1p_shift"] for p in parts])
    times = np.concatenate([p["times"] for p in parts])
    complete = done >= args.k_max
    ln_a = math.log(args.a)
    k_idx = np.arange(1, args.k_max + 1)
    cum_log = np.cumsum(log_norm[complete], axis=1)
    # per-block norms may sit exactly on the boundary; allow the documented
    # comparison slack (1e-9 in the log domain) times the block count
    major_slack = cum_log + k_idx[None, :] * ln_a
    major_ok = bool(np.all(major_slack <= k_idx[None, :] * 2e-9))
    ks_stat = p_value = float("nan")
    if args.k_max >= 2 and complete.sum() >= 100:
        r = sps.ks_2samp(log_norm[complete, 0], log_norm[complete, 1])
        ks_stat, p_value = float(r.statistic), float(r.pvalue)
    flat = log1p[complete].ravel()
    running = np.cumsum(flat) / np.arange(1, flat.size + 1)
    drift = abs(running[-1] - running[flat.size // 10]) / max(abs(running[-1]), 1e-12)
    report.write_json(out / "ladder.json", {
        "a": args.a, "k_max": args.k_max, "paths": args.paths, "cap": args.cap,
        "completed_fraction": float(complete.mean()),
        "block_product_bound_ok": major_ok,
        "ks_stat_block1_vs_block2": ks_stat, "ks_pvalue": p_value,
        "log1p_shift_running_mean": float(running[-1]) if flat.size else float("nan"),
        "log1p_shift_last_decade_drift": float(drift) if flat.size else float("nan"),
    })
    rows = []
    for path in range(min(args.paths, 2000)):
        for k in range(int(done[path])):
            rows.append((path, k + 1, int(times[path, k]), float(log_norm[path, k]), float(log1p[path, k])))
    report.write_csv(out / "ladder_blocks.csv",
                     ["path", "block", "time", "log_norm", "log1p_shift"], rows)
    if not args.no_figures and complete.any():
        report.fig_ladder(log_norm[complete], log1p[complete], args.a, out / "fig_ladder.png")
    passed = major_ok and (math.isnan(p_value) or p_value >= 0.05)
    return OK if passed else FAILED_CHECK


def _cmd_contractivity(args, spec, out):
    x0, y0 = _parse_vector(args.x0), _parse_vector(args.y0)
    eps = default_bernoulli_epsilon(spec, args.seed)
    window = default_contraction_window(spec, x0, args.seed)
    checkpoints = tuple(10**j for j in range(2, 20) if 10**j <= args.n)
    blocks = _blocks(args.paths, 256)
    parts = _map_tasks(
        _task_chain,
        [(spec_to_dict(spec), args.seed, first, count, x0, args.n, y0, window, eps, checkpoints)
         for first, count in blocks],
        args.workers,
    )
    run_min = np.concatenate([p.running_min_radius for p in parts])
    small_count = np.concatenate([p.small_product_count for p in parts])
    medians = np.concatenate([p.contraction_half_medians for p in parts])
    bern = np.concatenate([p.bernoulli_checkpoints for p in parts])
    steps = parts[0].bernoulli_steps
    min_ok = run_min < 10.0 * float(np.sum(x0))
    dec_ok = (medians[:, 1] < medians[:, 0]) | np.isneginf(medians[:, 1])
    growth_ok = np.all(np.diff(bern[:, -3:], axis=1) > 0, axis=1) if bern.shape[1] >= 3 else np.diff(bern, axis=1)[:, -1] > 0
    summary = {
        "n": args.n, "paths": args.paths,
        "bernoulli_epsilon": eps, "contraction_window": window,
        "checkpoints": [int(s) for s in steps],
        "min_radius_below_10x0_rate": float(min_ok.mean()),
        "median_decrease_rate": float(dec_ok.mean()),
        "bernoulli_growth_rate": float(growth_ok.mean()),
        "small_product_count_median": float(np.median(small_count)),
    }
    report.write_json(out / "contractivity.json", summary)
    report.write_csv(
        out / "contractivity_paths.csv",
        ["path", "running_min_radius", "small_product_count", "median_logdiff_h1",
         "median_logdiff_h2"] + [f"bern_n{int(s)}" for s in steps],
        [
            (i, float(run_min[i]), int(small_count[i]), float(medians[i, 0]), float(medians[i, 1]))
            + tuple(int(v) for v in bern[i])
            for i in range(args.paths)
        ],
    )
    if not args.no_figures:
        merged = parts[0]
        merged.contraction_half_medians = medians
        merged.bernoulli_checkpoints = bern
        report.fig_contractivity(merged, out / "fig_contractivity.png")
    passed = (
        summary["min_radius_below_10x0_rate"] >= 0.99
        and summary["median_decrease_rate"] >= 0.95
        and summary["bernoulli_growth_rate"] >= 0.99
    )
    return OK if passed else FAILED_CHECK


def _measure_csv(hist, path):
    report.write_csv(
        path,
        ["log2_radius_lo", "log2_radius_hi", "direction_cell", "count", "normalized_mass", "stderr"],
        hist.to_csv_rows(),
    )


def _cmd_invariant_measure(args, spec, out):
    x0 = _parse_vector(args.x0)
    cfg = HistogramConfig()
    if args.x0_alt is not None:
        seeds = [int(s) for s in (args.seeds or str(args.seed)).split(",")]
        rep, runs = uniqueness_check(
            spec, [x0, _parse_vector(args.x0_alt)], args.n, seeds, cfg
        )
        merged = runs[0]
        for h in runs[1:]:
            merged = merged.merge(h)
        _measure_csv(merged, out / "histogram.csv")
        report.write_json(out / "measure.json", {
            "n": args.n, "runs": rep.labels,
            "ref_count": merged.ref_count, "out_of_range": merged.out_of_range,
            "uniqueness_tv_matrix": rep.tv_matrix,
            "uniqueness_pass": rep.passed,
            "window_log2": list(rep.window_log2),
        })
        if not args.no_figures:
            report.fig_radial_profile(merged, out / "fig_radial.png")
        return OK if rep.passed else FAILED_CHECK
    hist = estimate_invariant_measure(spec, x0, args.n, cfg, seed=args.seed)
    _measure_csv(hist, out / "histogram.csv")
    report.write_json(out / "measure.json", {
        "n": args.n, "ref_count": hist.ref_count,
        "total_steps": hist.total_steps, "out_of_range": hist.out_of_range,
    })
    if not args.no_figures:
        report.fig_radial_profile(hist, out / "fig_radial.png")
    return OK


def _cmd_tail_report(args, spec, out):
    x0 = _parse_vector(args.x0)
    hist = estimate_invariant_measure(spec, x0, args.n, HistogramConfig(), seed=args.seed)
    tail = tail_diagnostics(hist)
    report.write_json(out / "tail.json", {
        "n": args.n,
        "slow_variation_pass": tail.slow_variation_pass,
        "c_hat": tail.c_hat, "c_stable": tail.c_stable, "band": list(tail.band),
        "strictly_increasing": tail.strictly_increasing,
        "unbounded_trend": tail.unbounded_trend,
    })
    report.write_csv(
        out / "tail_L.csv",
        ["log2_t", "L_hat"] + [f"ratio_s{s:g}" for s in tail.ratio_s],
        [
            (int(k), float(L)) + tuple(float(tail.ratio_s[s][i]) for s in tail.ratio_s)
            for i, (k, L) in enumerate(zip(tail.t_log2_grid, tail.L_hat))
        ],
    )
    report.write_csv(
        out / "tail_cumulative.csv",
        ["log2_radius", "cumulative_mass"],
        [(int(k), float(m)) for k, m in zip(tail.cumulative_k, tail.cumulative_mass)],
    )
    if not args.no_figures:
        report.fig_tail(tail, out / "fig_tail.png")
    passed = tail.slow_variation_pass and tail.strictly_increasing and tail.c_stable
    return OK if passed else FAILED_CHECK


def _cmd_oracle_compare(args, spec, out):
    walk = rank_one_reduce(spec)
    dp = first_passage_survival(walk, barrier=-math.log(args.a), n_max=args.n_max)
    tau = _stopping_times_parallel(
        spec, args.seed, args.reps, args.a, args.n_max, "norm", None, args.workers
    )
    grid = np.arange(1, args.n_max + 1)
    emp = (tau[None, :] > grid[:, None]).mean(axis=1)
    se = np.sqrt(np.maximum(emp * (1 - emp), 1e-12) / args.reps)
    z = np.abs(emp - dp) / se
    max_z = float(z.max())
    report.write_json(out / "oracle.json", {
        "a": args.a, "reps": args.reps, "n_max": args.n_max,
        "max_abs_z": max_z, "pass": max_z <= 3.0,
    })
    report.write_csv(
        out / "oracle_compare.csv",
        ["n", "dp_survival", "empirical_survival", "stderr"],
        [(int(n), float(d), float(e), float(s)) for n, d, e, s in zip(grid, dp, emp, se)],
    )
    if not args.no_figures:
        curve = _survival_from_tau(tau, grid, "norm", args.a, args.reps, args.n_max)
        report.fig_survival([curve], [None], out / "fig_oracle.png")
    return OK if max_z <= 3.0 else FAILED_CHECK


_COMMANDS = {
    "check-hypotheses": _cmd_check_hypotheses,
    "estimate-lyapunov": _cmd_estimate_lyapunov,
    "calibrate": _cmd_calibrate,
    "survival": _cmd_survival,
    "clt": _cmd_clt,
    "ladder": _cmd_ladder,
    "contractivity": _cmd_contractivity,
    "invariant-measure": _cmd_invariant_measure,
    "tail-report": _cmd_tail_report,
    "oracle-compare": _cmd_oracle_compare,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if "CRITMAT_SEED" in os.environ:
        args.seed = int(os.environ["CRITMAT_SEED"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    try:
        spec = load_spec(args.spec)
    except (SpecFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR
    try:
        code = _COMMANDS[args.command](args, spec, out)
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ERROR
    report.write_run_meta(out, {
        "command": args.command,
        "spec_path": str(args.spec),
        "seed": args.seed,
        "workers": args.workers,
        "version": __version__,
        "wall_seconds": time.time() - t0,
        "exit_code": code,
    })
    return code


if __name__ == "__main__":
    sys.exit(main())
