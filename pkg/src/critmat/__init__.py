"""critmat: Monte Carlo toolkit for the critical affine recursion
X -> AX + B on the nonnegative cone.

The package simulates the chain and its matrix products in log
coordinates, verifies the algebraic and projective-contraction structure
of nonnegative matrix semigroups, measures the 1/sqrt(n) fluctuation
tails of norm stopping times against an exact rank-one oracle, and
estimates the (infinite) invariant Radon measure by ratio-normalized
occupation statistics.
"""

from .cone import ConeMatrix, ConePoint, compose, cone_margin, norms, s_delta_margin
from .ensemble import (
    Atom,
    CalibrationResult,
    EnsembleSpec,
    GeneratorLaw,
    HypothesisReport,
    calibrate_critical,
    check_hypotheses,
    estimate_lyapunov,
    load_spec,
    sample_pair,
    save_spec,
)
from .fluctuation import clt_check, sqrt_tail_fit, survival_curve
from .measure import (
    HistogramConfig,
    OccupationHistogram,
    estimate_invariant_measure,
    tail_diagnostics,
    uniqueness_check,
)
from .metric import (
    Direction,
    MetricConstants,
    complete_zero_rows,
    contraction_coefficient,
    hennion_distance,
    projective_action,
)
from .oracle import ScalarWalkSpec, first_passage_survival, rank_one_reduce
from .simulate import (
    LadderSample,
    TrajectoryState,
    ladder_decomposition,
    run_trajectory,
    step,
    stopping_time,
    stopping_times,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "ConeMatrix", "ConePoint", "norms", "s_delta_margin", "cone_margin", "compose",
    "Direction", "MetricConstants", "hennion_distance", "projective_action",
    "contraction_coefficient", "complete_zero_rows",
    "EnsembleSpec", "Atom", "GeneratorLaw", "HypothesisReport", "CalibrationResult",
    "sample_pair", "estimate_lyapunov", "calibrate_critical", "check_hypotheses",
    "load_spec", "save_spec",
    "TrajectoryState", "LadderSample", "step", "run_trajectory",
    "stopping_time", "stopping_times", "ladder_decomposition",
    "ScalarWalkSpec", "rank_one_reduce", "first_passage_survival",
    "survival_curve", "sqrt_tail_fit", "clt_check",
    "HistogramConfig", "OccupationHistogram", "estimate_invariant_measure",
    "tail_diagnostics", "uniqueness_check",
]
