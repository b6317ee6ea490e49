"""Risk-sensitive allocation with regime switching and default contagion."""

from .approximation import ApproximationRun, error_bound, run_sequence, solve_level
from .dpe_solver import SolutionGrid, TimeGrid, dpe_residual, solve_finite, value_function
from .hamiltonian import LayerContext, beta_i, cost_l, hamiltonian_tilde_h, inner_minimize, layer_h_k
from .model import (
    CoefficientTable, DefaultState, FiniteModel, ModelSpec, RegimeGenerator, TruncatedModel,
    geometric_generator, neighbor, states_by_cardinality, truncate_generator, validate_model,
)
from .strategy import StrategyGrid, admissibility_report, extract_strategy

__version__ = "0.1.0"

__all__ = [
    "ApproximationRun", "error_bound", "run_sequence", "solve_level",
    "SolutionGrid", "TimeGrid", "dpe_residual", "solve_finite", "value_function",
    "LayerContext", "beta_i", "cost_l", "hamiltonian_tilde_h", "inner_minimize", "layer_h_k",
    "CoefficientTable", "DefaultState", "FiniteModel", "ModelSpec", "RegimeGenerator", "TruncatedModel",
    "geometric_generator", "neighbor", "states_by_cardinality", "truncate_generator", "validate_model",
    "StrategyGrid", "admissibility_report", "extract_strategy",
]
