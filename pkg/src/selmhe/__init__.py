"""Sensitivity-guided variable selection for joint state/parameter MHE."""

from .errors import (DimensionMismatch, DomainError, EstimationError,
                     NumericalFailure)
from .sysmodel import (AugmentedState, JacobianBundle, SystemModel, augment,
                       finite_difference_jacobian, jacobians, output,
                       output_jacobians, scale_model, step, step_jacobians)
from .sensitivity import (RankReport, SensitivityState, SensitivityWindow,
                          build_window_sensitivity, finite_difference_sensitivity,
                          linearized_observability_matrix, normalize_sensitivity,
                          numeric_rank, observability_matrix_linear,
                          propagate_initial_state_sensitivity,
                          propagate_param_sensitivity,
                          propagate_state_sensitivities)
from .selection import (ColumnRanking, SelectionPolicy, SelectionResult,
                        cutoff_value, orthogonalize_rank, select_variables,
                        unselected_set)
from .estimator import (EstimateTrajectory, EstimationRecord, MheConfig,
                        MheProblem, MovingHorizonEstimator, assemble_problem,
                        solve)
from . import cstr, harness

__version__ = "0.1.0"

__all__ = [
    "AugmentedState", "ColumnRanking", "DimensionMismatch", "DomainError",
    "EstimateTrajectory", "EstimationError", "EstimationRecord",
    "JacobianBundle", "MheConfig", "MheProblem", "MovingHorizonEstimator",
    "NumericalFailure", "RankReport", "SelectionPolicy", "SelectionResult",
    "SensitivityState", "SensitivityWindow", "SystemModel",
    "assemble_problem", "augment", "build_window_sensitivity", "cstr",
    "cutoff_value", "finite_difference_jacobian",
    "finite_difference_sensitivity", "harness", "jacobians",
    "linearized_observability_matrix", "normalize_sensitivity", "numeric_rank",
    "observability_matrix_linear", "orthogonalize_rank", "output",
    "output_jacobians", "propagate_initial_state_sensitivity",
    "propagate_param_sensitivity", "propagate_state_sensitivities",
    "scale_model", "select_variables", "solve", "step", "step_jacobians",
    "unselected_set",
]
