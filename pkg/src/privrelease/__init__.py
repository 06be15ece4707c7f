"""Optimal additive-noise release of tabular data with Cramer-Rao privacy floors."""

from .constrained import BoxConstraint, constrained_mechanism, sample_constrained, solve_ground_state
from .core import Dataset, RandomStream, ScalingMatrix, induced_inf_to_2_norm, matrix_power
from .correlated import build_invariance_operator, correlated_obfuscate, sample_correlated
from .estimators import (
    ConstrainedNoiseRelease,
    CorrelatedNoiseRelease,
    GaussianNoiseRelease,
    LaplaceNoiseRelease,
    LinearSVM,
    RidgeRegressor,
)
from .genml import estimate_sensitivity, fit_ridge, utility_floor
from .harness import ExperimentConfig, compare_mechanisms, run_experiment
from .mechanisms import matched_laplace_baseline, obfuscate, optimal_iid_mechanism, p_lambda_objective, sample_iid
from .privacy import adversary_floor, crb_bounds, dp_certify, fisher_information
from .svm import SvmConfig, kkt_residual, train_svm, verify_rho_limit

__version__ = "0.1.0"
