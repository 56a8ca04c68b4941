"""Conduct-parameter estimation in homogeneous-goods markets via constrained GMM.

The package bundles the log-linear market model's equilibrium theory, a
seeded synthetic data generator, the N2SLS moment machinery, a constrained
interior-point/augmented-Lagrangian solver, and a Monte Carlo harness that
reports per-parameter bias and RMSE across estimator variants.
"""

from .model import (
    DEFAULT_TRUE_PARAMS,
    Dataset,
    EstimatorKind,
    MarketExogenous,
    MarketObservation,
    ModelKind,
    PARAM_NAMES,
    ParameterVector,
    SolverConfig,
    StartPoint,
    StudyConfig,
)
from .dgp import DgpConfig, derive_seed, generate_dataset, read_dataset_csv, write_dataset_csv
from .equilibrium import (
    EquilibriumClass,
    EquilibriumKind,
    bisection_oracle,
    classify_equilibrium,
    fixed_point_residual,
    sample_delta_curve,
    solve_price,
    solve_quantity,
    xi_composite,
)
from .gmm import (
    InstrumentSet,
    MomentContext,
    build_instruments,
    build_moment_context,
    demand_residual,
    moment_vector,
    mpec_equality,
    mpec_supply_residual,
    objective,
    objective_gradient,
    supply_residual,
    weight_matrix,
)
from .solver import (
    ConstraintReport,
    EstimateResult,
    Termination,
    check_constraints,
    diagnose_divergence,
    estimate,
    solve_nlp,
)
from .montecarlo import (
    CellResult,
    StudyResult,
    bias_rmse,
    convergence_rate,
    render_study_table,
    run_study,
    write_study_csv,
)

__all__ = [
    "DEFAULT_TRUE_PARAMS", "Dataset", "EstimatorKind", "MarketExogenous",
    "MarketObservation", "ModelKind", "PARAM_NAMES", "ParameterVector",
    "SolverConfig", "StartPoint", "StudyConfig",
    "DgpConfig", "derive_seed", "generate_dataset", "read_dataset_csv",
    "write_dataset_csv",
    "EquilibriumClass", "EquilibriumKind", "bisection_oracle",
    "classify_equilibrium", "fixed_point_residual", "sample_delta_curve",
    "solve_price", "solve_quantity", "xi_composite",
    "InstrumentSet", "MomentContext", "build_instruments",
    "build_moment_context", "demand_residual", "moment_vector",
    "mpec_equality", "mpec_supply_residual", "objective",
    "objective_gradient", "supply_residual", "weight_matrix",
    "ConstraintReport", "EstimateResult", "Termination", "check_constraints",
    "diagnose_divergence", "estimate", "solve_nlp",
    "CellResult", "StudyResult", "bias_rmse", "convergence_rate",
    "render_study_table", "run_study", "write_study_csv",
]
