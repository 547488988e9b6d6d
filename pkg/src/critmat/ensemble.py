"""Ensembles of random (matrix, shift) pairs: specification, sampling,
Lyapunov exponent estimation, calibration to criticality, and checks of
the moment / uniformity / criticality hypotheses the theory needs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .cone import (
    REL_TOL,
    ConeMatrix,
    ConePoint,
    batch_col_norms,
    batch_s_delta_margin,
    s_delta_margin,
)
from .engine import CompiledLaw, vector_log_block
from .rng import UTILITY, stream

__all__ = [
    "Atom",
    "GeneratorLaw",
    "EnsembleSpec",
    "SpecFormatError",
    "CalibrationError",
    "CalibrationResult",
    "HypothesisReport",
    "sample_pair",
    "estimate_lyapunov",
    "calibrate_critical",
    "check_hypotheses",
    "load_spec",
    "save_spec",
    "spec_from_dict",
    "spec_to_dict",
]


class SpecFormatError(ValueError):
    """Raised for malformed ensemble spec files; carries field diagnostics."""


class CalibrationError(RuntimeError):
    """Raised when calibration cannot push the exponent under tolerance."""

    def __init__(self, message: str, gamma_hat: float):
        super().__init__(message)
        self.gamma_hat = gamma_hat


@dataclass(frozen=True)
class Atom:
    """One support point of a finite law: weight, matrix A, shift B."""

    weight: float
    matrix: ConeMatrix
    shift: ConePoint


@dataclass(frozen=True)
class GeneratorLaw:
    """Parametric family: i.i.d. log10-uniform entries clamped per row so the
    delta-uniformity condition holds by construction; shifts log10-uniform."""

    entry_log10_range: tuple[float, float]
    b_log10_range: tuple[float, float]


@dataclass(frozen=True)
class EnsembleSpec:
    """Law of the i.i.d. (A, B) pairs plus the uniformity parameter delta.

    ``scale`` multiplies every sampled matrix; atom matrices are stored
    unscaled.  Immutable; derive rescaled laws with :meth:`with_scale`.
    """

    dim: int
    delta: float
    atoms: tuple[Atom, ...] | None = None
    generator: GeneratorLaw | None = None
    scale: float = 1.0

    def __post_init__(self):
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must lie in (0, 1], got {self.delta}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if (self.atoms is None) == (self.generator is None):
            raise ValueError("exactly one of atoms/generator must be given")
        if self.atoms is not None:
            if not self.atoms:
                raise ValueError("atom list is empty")
            total = 0.0
            for i, atom in enumerate(self.atoms):
                if not 0 < atom.weight <= 1:
                    raise ValueError(f"atom {i}: weight must lie in (0, 1]")
                if atom.matrix.dim != self.dim or atom.shift.dim != self.dim:
                    raise ValueError(f"atom {i}: dimension mismatch with dim={self.dim}")
                margin = s_delta_margin(atom.matrix)
                if margin < self.delta * (1.0 - REL_TOL) - REL_TOL:
                    raise ValueError(
                        f"atom {i}: row-uniformity margin {margin:.6g} below delta={self.delta}"
                    )
                total += atom.weight
            if abs(total - 1.0) > 1e-12:
                raise ValueError(f"atom weights sum to {total!r}, expected 1")
        else:
            lo, hi = self.generator.entry_log10_range
            blo, bhi = self.generator.b_log10_range
            if not (lo <= hi and blo <= bhi):
                raise ValueError("generator ranges must be ordered [lo, hi]")

    def with_scale(self, scale: float) -> "EnsembleSpec":
        return replace(self, scale=scale)

    def compile(self) -> CompiledLaw:
        if self.atoms is not None:
            w = np.array([a.weight for a in self.atoms])
            cumw = np.cumsum(w)
            cumw[-1] = 1.0
            mats = np.stack([a.matrix.entries for a in self.atoms]) * self.scale
            shifts = np.stack([a.shift.coords for a in self.atoms])
            return CompiledLaw(
                dim=self.dim,
                delta=self.delta,
                scale=self.scale,
                atom_cumw=cumw,
                atom_mats=mats,
                atom_shifts=shifts,
            )
        return CompiledLaw(
            dim=self.dim,
            delta=self.delta,
            scale=self.scale,
            gen_entry_range=tuple(self.generator.entry_log10_range),
            gen_shift_range=tuple(self.generator.b_log10_range),
        )


def sample_pair(spec: EnsembleSpec, rng: np.random.Generator) -> tuple[ConeMatrix, ConePoint]:
    """One (scale * A, B) pair; deterministic given the generator state."""
    mats, shifts = spec.compile().draw(rng, 1)
    return ConeMatrix.from_array(mats[0]), ConePoint.from_array(shifts[0])


def _lyapunov_burn_in(n: int) -> int:
    return min(100, n // 10)


def lyapunov_replicas(
    spec: EnsembleSpec,
    n: int,
    reps: int,
    seed: int,
    x0: np.ndarray | None = None,
    first_index: int = 0,
) -> np.ndarray:
    """Per-replica exponent estimates (average log-norm gain after burn-in)."""
    if n < 100:
        raise ValueError(f"n must be at least 100, got {n}")
    if reps < 1:
        raise ValueError(f"reps must be positive, got {reps}")
    x0 = np.full(spec.dim, 1.0 / spec.dim) if x0 is None else np.asarray(x0, float)
    n0 = _lyapunov_burn_in(n)
    law = spec.compile()
    logs = vector_log_block(law, seed, first_index, reps, n, (n0, n), x0)
    return (logs[:, 1] - logs[:, 0]) / (n - n0)


def estimate_lyapunov(
    spec: EnsembleSpec,
    n: int,
    reps: int,
    seed: int,
    x0: np.ndarray | None = None,
    first_index: int = 0,
) -> tuple[float, float]:
    """Monte Carlo exponent of the matrix law: (gamma_hat, 95% CI half-width).

    Per replica, gamma is the average log-norm gain of the product applied
    to a fixed start, after a short burn-in that removes the direction
    transient; everything is accumulated in the log domain so no horizon
    overflows.  The CI comes from the across-replica variance.
    """
    per_rep = lyapunov_replicas(spec, n, reps, seed, x0=x0, first_index=first_index)
    gamma = float(per_rep.mean())
    if reps == 1:
        return gamma, math.inf
    ci = 1.96 * float(per_rep.std(ddof=1)) / math.sqrt(reps)
    return gamma, ci


@dataclass(frozen=True)
class CalibrationResult:
    """Rescaled ensemble plus the evidence that it is critical."""

    spec: EnsembleSpec
    gamma_hat: float
    ci_half_width: float
    rounds: int
    scale_multiplier: float
    a5_pass: bool
    a5_witness_prob: float


def calibrate_critical(
    spec: EnsembleSpec,
    target_tol: float = 1e-3,
    seed: int = 0,
    n: int = 10_000,
    reps: int = 400,
) -> CalibrationResult:
    """Rescale the matrix law so its exponent vanishes.

    Multiplying every matrix by c shifts the exponent by ln c exactly, so
    each round multiplies the scale by exp(-gamma_hat) and re-estimates
    with a fresh stream; fails after 5 rounds outside ``target_tol``.
    The shift part of the law is untouched.
    """
    original_scale = spec.scale
    gamma = ci = None
    for round_idx in range(5):
        gamma, ci = estimate_lyapunov(spec, n, reps, seed, first_index=2 * round_idx * reps)
        spec = spec.with_scale(spec.scale * math.exp(-gamma))
        gamma2, ci2 = estimate_lyapunov(
            spec, n, reps, seed, first_index=(2 * round_idx + 1) * reps
        )
        if abs(gamma2) <= target_tol:
            a5_prob = _a5_witness_prob(spec, seed)
            return CalibrationResult(
                spec=spec,
                gamma_hat=gamma2,
                ci_half_width=ci2,
                rounds=round_idx + 1,
                scale_multiplier=spec.scale / original_scale,
                a5_pass=a5_prob > 0,
                a5_witness_prob=a5_prob,
            )
        gamma, ci = gamma2, ci2
    raise CalibrationError(
        f"|gamma_hat| = {abs(gamma):.3e} still above {target_tol} after 5 rounds", gamma
    )


def _a5_witness_prob(spec: EnsembleSpec, seed: int, samples: int = 4096) -> float:
    """Probability mass of matrices with col_min >= 1 + delta (scaled law)."""
    if spec.atoms is not None:
        return float(
            sum(
                a.weight
                for a in spec.atoms
                if a.matrix.col_min * spec.scale >= 1.0 + spec.delta - REL_TOL
            )
        )
    mats, _ = spec.compile().draw(stream(seed, UTILITY, 17), samples)
    _, vmin = batch_col_norms(mats)
    return float((vmin >= 1.0 + spec.delta).mean())


@dataclass(frozen=True)
class HypothesisReport:
    """Finite-sample verdicts on the standing hypotheses.

    The moment fields can only estimate, never certify, finiteness; the
    invariant-subspace condition is probed through its operative
    consequence (products with spectral radius on both sides of 1), since
    the literal statement is not decidable from samples.  ``a2_note``
    records that ambiguity.
    """

    delta: float
    a1_sample_moment: float
    a1_hill_alpha: float
    a2_heuristic: str  # "pass" | "degenerate-suspected" | "inconclusive"
    a2_witness_radii: tuple[float, float]
    a3_pass: bool
    a4_gamma_hat: float
    a4_ci_half_width: float
    a5_pass: bool
    a5_witness_prob: float
    b_nonzero_prob: float
    b_log_moment: float
    a2_note: str = (
        "heuristic: literal invariant-subspace nondegeneracy is not decidable "
        "from samples; probed via spectral radii of bounded-length products"
    )

    @property
    def passed(self) -> bool:
        """Hard checks only; the moment estimates and the a2 probe are advisory."""
        a4_ok = abs(self.a4_gamma_hat) <= max(1e-3, 3.0 * self.a4_ci_half_width)
        return self.a3_pass and self.a5_pass and self.b_nonzero_prob > 0 and a4_ok

    def to_dict(self) -> dict:
        return {
            "delta": self.delta,
            "a1_sample_moment": self.a1_sample_moment,
            "a1_hill_alpha": self.a1_hill_alpha,
            "a2_heuristic": self.a2_heuristic,
            "a2_witness_radii": list(self.a2_witness_radii),
            "a2_note": self.a2_note,
            "a3_pass": self.a3_pass,
            "a4_gamma_hat": self.a4_gamma_hat,
            "a4_ci_half_width": self.a4_ci_half_width,
            "a5_pass": self.a5_pass,
            "a5_witness_prob": self.a5_witness_prob,
            "b_nonzero_prob": self.b_nonzero_prob,
            "b_log_moment": self.b_log_moment,
            "passed": self.passed,
        }


def _hill_tail_index(values: np.ndarray) -> float:
    """Hill estimator over the top 1% of positive values (advisory).

    Finite-support laws give ties at the top and an infinite index, which
    is the right reading: no power tail.
    """
    pos = np.sort(values[values > 0])
    k = max(10, len(pos) // 100)
    if len(pos) <= k:
        return math.inf
    top = pos[-k:]
    floor = pos[-k - 1]
    mean_log = float(np.mean(np.log(top / floor)))
    return 1.0 / mean_log if mean_log > 0 else math.inf


def _spectral_radius_scan(spec: EnsembleSpec, seed: int, n_products: int = 64):
    """Spectral radii of products of random bounded length (<= 50).

    Products are accumulated in normalized form (allowable matrices have
    positive spectral radius, so the log recombination is safe); the
    returned radii are clamped into float range.
    """
    gen = stream(seed, UTILITY, 23)
    law = spec.compile()
    radii = []
    for _ in range(n_products):
        length = int(gen.integers(1, 51))
        mats, _ = law.draw(gen, length)
        log_scale = 0.0
        prod = np.eye(spec.dim)
        for A in mats:
            prod = A @ prod
            s = prod.sum(axis=0).max()
            log_scale += np.log(s)
            prod = prod / s
        rho_unit = float(np.abs(np.linalg.eigvals(prod)).max())
        log_rho = log_scale + math.log(max(rho_unit, 1e-300))
        radii.append(math.exp(min(max(log_rho, -700.0), 700.0)))
    return np.asarray(radii)


def check_hypotheses(spec: EnsembleSpec, samples: int, seed: int) -> HypothesisReport:
    """Fill a :class:`HypothesisReport` for the scaled law.

    Atom laws are checked exactly where the support is finite (uniformity,
    witness probabilities, shift mass); sampled laws empirically.
    Inconclusive verdicts are values, not errors.
    """
    if samples < 1000:
        raise ValueError(f"samples must be at least 1000, got {samples}")
    law = spec.compile()
    gen = stream(seed, UTILITY, 11)
    mats, shifts = law.draw(gen, samples)
    cmax, cmin = batch_col_norms(mats)
    frak_n = np.maximum(1.0 / cmin, cmax)
    log_n = np.log(frak_n)
    a1_moment = float(np.mean(log_n ** (2.0 + spec.delta)))
    a1_hill = _hill_tail_index(log_n)

    if spec.atoms is not None:
        a3 = all(
            s_delta_margin(a.matrix) >= spec.delta * (1.0 - REL_TOL) - REL_TOL
            for a in spec.atoms
        )
        a5_prob = float(
            sum(
                a.weight
                for a in spec.atoms
                if a.matrix.col_min * spec.scale >= 1.0 + spec.delta - REL_TOL
            )
        )
        b_nonzero = float(sum(a.weight for a in spec.atoms if a.shift.norm > 0))
        b_norms = np.array([a.shift.norm for a in spec.atoms])
        b_weights = np.array([a.weight for a in spec.atoms])
        b_moment = float(
            np.sum(b_weights * np.maximum(np.log(np.maximum(b_norms, 1e-300)), 0.0) ** (2.0 + spec.delta))
        )
    else:
        a3 = bool(np.all(batch_s_delta_margin(mats) >= spec.delta * (1.0 - REL_TOL) - REL_TOL))
        a5_prob = float((cmin >= 1.0 + spec.delta).mean())
        b_l1 = shifts.sum(axis=1)
        b_nonzero = float((b_l1 > 0).mean())
        b_moment = float(
            np.mean(np.maximum(np.log(np.maximum(b_l1, 1e-300)), 0.0) ** (2.0 + spec.delta))
        )

    gamma, ci = estimate_lyapunov(spec, n=4000, reps=64, seed=seed, first_index=0)

    radii = _spectral_radius_scan(spec, seed)
    lo, hi = float(radii.min()), float(radii.max())
    if np.all(np.abs(radii - 1.0) <= 1e-9):
        a2 = "degenerate-suspected"
    elif lo < 1.0 - 1e-9 and hi > 1.0 + 1e-9:
        a2 = "pass"
    else:
        a2 = "inconclusive"

    return HypothesisReport(
        delta=spec.delta,
        a1_sample_moment=a1_moment,
        a1_hill_alpha=a1_hill,
        a2_heuristic=a2,
        a2_witness_radii=(lo, hi),
        a3_pass=a3,
        a4_gamma_hat=gamma,
        a4_ci_half_width=ci,
        a5_pass=a5_prob > 0,
        a5_witness_prob=a5_prob,
        b_nonzero_prob=b_nonzero,
        b_log_moment=b_moment,
    )


# --- spec file format -------------------------------------------------------
#
# JSON object with fields {dim, delta, scale, atoms | generator}; atoms is a
# list of {weight, A, B}; generator is {entry_log10_range, b_log10_range}.
# Unknown fields are rejected at every level.

_TOP_FIELDS = {"dim", "delta", "scale", "atoms", "generator"}
_ATOM_FIELDS = {"weight", "A", "B"}
_GEN_FIELDS = {"entry_log10_range", "b_log10_range"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise SpecFormatError(f"{where}: unknown field(s) {sorted(unknown)}")


def spec_from_dict(data: dict) -> EnsembleSpec:
    if not isinstance(data, dict):
        raise SpecFormatError(f"top level: expected an object, got {type(data).__name__}")
    _reject_unknown(data, _TOP_FIELDS, "top level")
    for field_name in ("dim", "delta"):
        if field_name not in data:
            raise SpecFormatError(f"top level: missing required field {field_name!r}")
    try:
        dim = int(data["dim"])
        delta = float(data["delta"])
        scale = float(data.get("scale", 1.0))
    except (TypeError, ValueError) as exc:
        raise SpecFormatError(f"top level: bad scalar field ({exc})") from None
    if ("atoms" in data) == ("generator" in data):
        raise SpecFormatError("top level: exactly one of 'atoms'/'generator' required")
    try:
        if "atoms" in data:
            atoms = []
            for i, raw in enumerate(data["atoms"]):
                where = f"atoms[{i}]"
                if not isinstance(raw, dict):
                    raise SpecFormatError(f"{where}: expected an object")
                _reject_unknown(raw, _ATOM_FIELDS, where)
                for f in _ATOM_FIELDS:
                    if f not in raw:
                        raise SpecFormatError(f"{where}: missing field {f!r}")
                atoms.append(
                    Atom(
                        weight=float(raw["weight"]),
                        matrix=ConeMatrix.from_array(raw["A"]),
                        shift=ConePoint.from_array(raw["B"]),
                    )
                )
            return EnsembleSpec(dim=dim, delta=delta, atoms=tuple(atoms), scale=scale)
        raw = data["generator"]
        if not isinstance(raw, dict):
            raise SpecFormatError("generator: expected an object")
        _reject_unknown(raw, _GEN_FIELDS, "generator")
        for f in _GEN_FIELDS:
            if f not in raw:
                raise SpecFormatError(f"generator: missing field {f!r}")
        gen = GeneratorLaw(
            entry_log10_range=tuple(float(v) for v in raw["entry_log10_range"]),
            b_log10_range=tuple(float(v) for v in raw["b_log10_range"]),
        )
        return EnsembleSpec(dim=dim, delta=delta, generator=gen, scale=scale)
    except SpecFormatError:
        raise
    except (TypeError, ValueError) as exc:
        raise SpecFormatError(str(exc)) from None


def spec_to_dict(spec: EnsembleSpec) -> dict:
    out: dict = {"dim": spec.dim, "delta": spec.delta, "scale": spec.scale}
    if spec.atoms is not None:
        out["atoms"] = [
            {
                "weight": a.weight,
                "A": a.matrix.entries.tolist(),
                "B": a.shift.coords.tolist(),
            }
            for a in spec.atoms
        ]
    else:
        out["generator"] = {
            "entry_log10_range": list(spec.generator.entry_log10_range),
            "b_log10_range": list(spec.generator.b_log10_range),
        }
    return out


def load_spec(path) -> EnsembleSpec:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecFormatError(
                f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
            ) from None
    try:
        return spec_from_dict(data)
    except SpecFormatError as exc:
        raise SpecFormatError(f"{path}: {exc}") from None


def save_spec(spec: EnsembleSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")
