"""Stochastic trust-region methods with exact subproblem solves, recursive gradient estimators and DRO objectives."""
from ._kernels import backend
from .algorithms import (BtPolicy, DiagnosticFlags, RunTrace, Schedule, ScheduleWarning, TraceRecord,
                         derive_schedule, run_drtr, run_sgd_baseline, run_trust_region, run_trust_region_vr)
from .config import ExperimentConfig, parse_config
from .core import (Batch, Iterate, SeededRng, SmoothnessProfile, StochasticOracle, batch_gradient, batch_hessian,
                   draw_batch, hvp)
from .diagnostics import (StationarityCertificate, ball_grid_minimum, certify, fd_validate,
                          hessian_concentration_trial, per_class_accuracy)
from .dro import Conjugate, DroDualObjective, conjugate_eval, dro_hessian, dro_value_grad, minimize_eta, psi_stationarity
from .errors import (ConfigError, DegenerateGradient, DegenerateSubspace, InvalidArgument, InvariantViolation,
                     NumericFailure, TrgsError, UnsupportedOperation)
from .estimators import (SpiderState, estimate_gradient_variance, estimate_hessian_variance, estimate_smoothness,
                         hessian_batch_size, spider_gradient)
from .harness import run_experiment
from .problems import (ImbalancedDataset, ModelParams, logistic_oracle, make_exp_scalar, make_imbalanced_mixture,
                       make_quadratic, make_quartic_saddle, mlp_oracle)
from .subproblem import Subproblem2D, TrustRegionStep, kkt_and_decrease, solve_2d_metric, solve_clipped, solve_general, solve_normalized
from .validation import run_validation_suite

__version__ = "0.1.0"
