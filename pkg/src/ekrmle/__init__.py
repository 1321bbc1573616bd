"""Ensemble Kalman randomized maximum likelihood estimation (EK-RMLE).

Linear inverse problems, ensemble Kalman iterations, mean-field analysis,
LTI smoothing problems and balanced truncation for Bayesian inference.
"""
from .balanced_truncation import (
    BalancingFactors,
    ReducedModel,
    balance,
    observability_gramian,
    prior_from_lyapunov,
    reduce,
    reduced_forward_operator,
    reduced_posterior,
    solve_lyapunov,
)
from .ensemble_kalman import (
    Ensemble,
    PerturbationScheme,
    PerturbedData,
    RunTrace,
    StoppingRule,
    eki_step,
    initial_ensemble,
    kalman_gain,
    perturb_observations,
    run,
    sample_cov,
    sample_mean,
)
from .errors import (
    DivergenceError,
    InstabilityError,
    NumericalError,
    RankError,
    UnsupportedOperatorError,
    ValidationError,
)
from .experiments import (
    ExperimentConfig,
    convergence_experiment,
    posterior_error_metrics,
    random_problem,
    smoothing_experiment,
)
from .linear_forward import (
    ForwardOperator,
    GaussianPosterior,
    GaussianPrior,
    InverseProblem,
    apply_forward,
    augment_rls,
    exact_posterior,
    minimum_norm_solution,
)
from .lti import LTISystem, forward_operator, heat_model, observe, simulate, synthesize_data
from .mean_field import (
    eigenvalue_recurrence,
    mean_field_cov_iterate,
    mean_field_limits,
    obs_eigenproblem,
    projected_residual_series,
    rate_bound,
    state_eigenproblem,
)
from .streams import Streams

__version__ = "0.1.0"
