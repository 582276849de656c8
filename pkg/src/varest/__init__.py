"""Discrete-time variational inverse problems (4D-Var) with first-order
a-posteriori estimation of the error that model imperfections and data
noise induce in a scalar quantity of interest of the analysis."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BreakdownNegativeCurvature,
    ConfigError,
    DimensionMismatch,
    DimensionTooLarge,
    LineSearchFailure,
    NonConvergence,
    NonFiniteState,
    NotAtOptimum,
    NotPSD,
    SingularConstraintJacobian,
    StabilityViolation,
    VarestError,
)
from .linalg import CovMatrix, SymOp, cg_solve, fd_gradient, fd_jacvec, lbfgs_minimize  # noqa: F401
from .model import Model, Trajectory, fd_fallback_wrap, propagate  # noqa: F401
from .models import (  # noqa: F401
    Heat1dConfig,
    LinearModel,
    Lorenz96Config,
    PerturbedModel,
    heat1d_build,
    lorenz96_build,
)
from .fourdvar import (  # noqa: F401
    AssimilationResult,
    Background,
    ObservationSet,
    assimilate,
    cost,
    gradient,
    hess_vec,
    make_context,
)
from .estimator import (  # noqa: F401
    ErrorBudget,
    ImpactFactors,
    QoiFunctional,
    compute_impact_factors,
    estimate_error_budget,
    estimate_error_statistics,
    posterior_covariance_column,
)
from .perturbation import (  # noqa: F401
    CorrelationKernel,
    PerturbationSpec,
    constant_model_error,
    sample_data_errors,
    sample_model_errors,
)
from .validation import (  # noqa: F401
    EnsembleReport,
    FiniteDimProblem,
    appendix_c_estimate,
    convergence_order_study,
    ensemble_validate,
    oracle_perturbed_resolve,
    oracle_perturbed_resolve_finite,
    solve_reference,
)
