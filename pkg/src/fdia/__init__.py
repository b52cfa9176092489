"""Targeted false-data-injection toolkit for AC state estimation."""
from .errors import (AttackError, CaseError, ConvergenceError, EstimationError,
                     FdiaError, SimulationError)
from .grid import NetworkModel, StateVector, builtin_case, load_case, parse_case

__all__ = ["AttackError", "CaseError", "ConvergenceError", "EstimationError", "FdiaError",
           "SimulationError", "NetworkModel", "StateVector", "builtin_case", "load_case", "parse_case"]
__version__ = "0.1.0"
