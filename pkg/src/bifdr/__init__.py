"""Doubly robust estimation of functionals with bilinear influence functions.

The library estimates scalar functionals chi(P) whose first-order influence
function has the form S_ab * a(Z) * b(Z) + m_a(O, a) + m_b(O, b) + S_0 - chi.
Nuisances a and b are fit by l1-penalized convex losses tailored to the
functional, then combined by sample splitting and cross-fitting into a point
estimate with a Wald confidence interval.
"""

from .crossfit import (
    CrossfitEstimate,
    FoldPlan,
    estimate_ate,
    estimate_auto,
    estimate_lin,
    estimate_mix,
    estimate_nonlin,
    split_folds,
    wald_ci,
)
from .links import LINK_NAMES, LinkFunction, link
from .loss import LossProblem, build_loss, loss_grad, loss_value
from .model import (
    Basis,
    DataError,
    Dataset,
    EstimandTruth,
    FiniteTable,
    FunctionalSpec,
    eval_upsilon,
    mixed_bias_gap,
    registry_get,
    registry_names,
)
from .simulate import (
    DgpConfig,
    SimulationReport,
    gen_experiment,
    naive_estimators,
    run_monte_carlo,
    theta_weak_sparse,
    toeplitz_sigma,
)
from .solver import (
    FitConfig,
    LambdaCV,
    LambdaFixed,
    LambdaRate,
    PenalizedFit,
    SolverError,
    cv_lambda,
    default_lambda,
    fit_l1,
    kkt_residual,
    soft_threshold,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "Basis",
    "CrossfitEstimate",
    "DataError",
    "Dataset",
    "DgpConfig",
    "EstimandTruth",
    "FiniteTable",
    "FitConfig",
    "FoldPlan",
    "FunctionalSpec",
    "LambdaCV",
    "LambdaFixed",
    "LambdaRate",
    "LINK_NAMES",
    "LinkFunction",
    "LossProblem",
    "PenalizedFit",
    "SimulationReport",
    "SolverError",
    "build_loss",
    "cv_lambda",
    "default_lambda",
    "estimate_ate",
    "estimate_auto",
    "estimate_lin",
    "estimate_mix",
    "estimate_nonlin",
    "eval_upsilon",
    "fit_l1",
    "gen_experiment",
    "kkt_residual",
    "link",
    "loss_grad",
    "loss_value",
    "mixed_bias_gap",
    "naive_estimators",
    "registry_get",
    "registry_names",
    "run_monte_carlo",
    "soft_threshold",
    "split_folds",
    "theta_weak_sparse",
    "toeplitz_sigma",
    "wald_ci",
]
