"""Power-system state estimation over complex bus voltages."""
from .exceptions import CaseError, GridStateError, SolverError, UnobservableError
from .grid import GridCase, build_admittance, bundled_case, load_case
from .measurements import (MeasurementPlan, MeasurementSet, align_phase, crlb, evaluate, fim, generate_plan,
                           load_plan, real_jacobian, simulate, wls_cost)
from .static import SolverOptions, StateEstimate, fpp_solve, gauss_newton, penalized_sdr, run_estimator, sdr_solve

__version__ = "0.1.0"

__all__ = [
    "CaseError", "GridStateError", "SolverError", "UnobservableError",
    "GridCase", "build_admittance", "bundled_case", "load_case",
    "MeasurementPlan", "MeasurementSet", "align_phase", "crlb", "evaluate", "fim", "generate_plan", "load_plan",
    "real_jacobian", "simulate", "wls_cost",
    "SolverOptions", "StateEstimate", "fpp_solve", "gauss_newton", "penalized_sdr", "run_estimator", "sdr_solve",
]
