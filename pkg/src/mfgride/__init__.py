"""Mean-field equilibria of ride-hailing drivers under radius-constrained spatial matching."""

__version__ = "0.1.0"

from .equilibrium import (DYNAMIC, ConvergenceError, EquilibriumResult, find_multiple_kkt, poa_probe,
                          single_region_equilibria, solve_mfg, sqrt_regime_classify, verify_best_response)
from .model import MatchingRadii, NetworkModel, RegionParams, validate
from .radius_opt import monotonicity_certificate, optimal_radius, optimal_sojourn
from .simulator import SimConfig, SimMetrics, replicate, run
from .timing import FormulaMode, sojourn

__all__ = [
    "DYNAMIC", "ConvergenceError", "EquilibriumResult", "FormulaMode", "MatchingRadii", "NetworkModel",
    "RegionParams", "SimConfig", "SimMetrics", "find_multiple_kkt", "monotonicity_certificate",
    "optimal_radius", "optimal_sojourn", "poa_probe", "replicate", "run", "single_region_equilibria",
    "sojourn", "solve_mfg", "sqrt_regime_classify", "validate", "verify_best_response",
]
