"""Fay-Herriot area-level model: adjusted-likelihood variance estimation, multi-goal priors,
posterior summaries by quadrature, MSE estimation and a simulation harness."""

__version__ = "0.1.0"

from .core import (AreaLevelDataset, DomainError, Hyperparameters, SingularDesignError, blup,
                   gls_beta, gls_beta_heterogeneous, regression_fit, shrinkage, trace_v_inv_pow)
from .likelihood import (AdjustmentError, AdjustmentSpec, PriorSpec, Propriety, check_propriety,
                         check_propriety_spec, log_adjustment, log_adjustment_derivative, log_prior,
                         log_prior_derivative, log_residual_likelihood, log_residual_likelihood_derivative)
from .estimators import (AreaFit, EstimationError, FitMethod, MaximizerDiagnostics, fit,
                         maximize_adjusted_likelihood, theorem1_gap)
from .mse import (BootstrapConfig, BootstrapError, BootstrapResult, MseComponents, bootstrap_mse,
                  g_components, taylor_mse, var_b_hat)
from .bayes import (ExpansionTerms, ImproperPosteriorError, PosteriorSummary, QuadratureError,
                    datta_expansion_check, expansion_terms, flat_prior_bias_term, marginal_log_posterior,
                    posterior_summary)
from .nerm import (DegenerateDesignError, NermDesign, Psi, adjustment_gradient, curvature_h,
                   fisher_inverse, shrinkage_gradient, shrinkage_hessian)
from .verify import (SimulationConfig, StudyReport, bias_study, simulate_dataset, theorem_study)

__all__ = [
    "AreaLevelDataset", "DomainError", "Hyperparameters", "SingularDesignError", "blup", "gls_beta",
    "gls_beta_heterogeneous", "regression_fit", "shrinkage", "trace_v_inv_pow",
    "AdjustmentError", "AdjustmentSpec", "PriorSpec", "Propriety", "check_propriety", "check_propriety_spec",
    "log_adjustment", "log_adjustment_derivative", "log_prior", "log_prior_derivative",
    "log_residual_likelihood", "log_residual_likelihood_derivative",
    "AreaFit", "EstimationError", "FitMethod", "MaximizerDiagnostics", "fit", "maximize_adjusted_likelihood",
    "theorem1_gap", "BootstrapConfig", "BootstrapError", "BootstrapResult", "MseComponents", "bootstrap_mse",
    "g_components", "taylor_mse", "var_b_hat", "ExpansionTerms", "ImproperPosteriorError", "PosteriorSummary",
    "QuadratureError", "datta_expansion_check", "expansion_terms", "flat_prior_bias_term",
    "marginal_log_posterior", "posterior_summary", "DegenerateDesignError", "NermDesign", "Psi",
    "adjustment_gradient", "curvature_h", "fisher_inverse", "shrinkage_gradient", "shrinkage_hessian",
    "SimulationConfig", "StudyReport", "bias_study", "simulate_dataset", "theorem_study",
]
