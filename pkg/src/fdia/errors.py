"""Exception hierarchy shared by all modules."""


class FdiaError(Exception):
    """Base class for every error raised by the package."""


class CaseError(FdiaError, ValueError):
    """Invalid case file or network model."""


class ConvergenceError(FdiaError):
    """An iterative solver did not converge."""


class SimulationError(FdiaError):
    """The stochastic integration left the admissible voltage band."""


class EstimationError(FdiaError):
    """Parameter identification from PMU data failed."""


class AttackError(FdiaError):
    """Attack synthesis failed (infeasible region or zero-injection solve)."""
