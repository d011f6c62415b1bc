"""Exception and warning types shared across the package."""

from __future__ import annotations


class StochPathError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(StochPathError, ValueError):
    """A parameter record or configuration violates an invariant.

    ``violations`` holds ``(field_path, message)`` pairs.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class UnphysicalStateError(StochPathError, ValueError):
    pass


class FrameDegenerateError(StochPathError):
    """The diagonal frame needs a nonzero Rabi frequency."""


class DegenerateEigenvalueError(StochPathError):
    """Gamma equals 2*Delta, so Omega vanishes and kappa_2, kappa_3 diverge."""


class NumericalConsistencyError(StochPathError):
    pass


class UnderflowError(StochPathError, FloatingPointError):
    """Trace of the unnormalised post-measurement state underflowed."""


class StepSizeError(StochPathError):
    """A stochastic Euler-type step left the Bloch ball by more than the tolerance."""


class SimulationError(StochPathError):
    """Kernel failure inside a trajectory, with the offending step attached."""

    def __init__(self, message, step=None, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory


class ResourceLimitError(StochPathError, MemoryError):
    pass


class BoundaryDivergenceError(StochPathError, ValueError):
    """|z| >= 1 where atanh is needed."""


class EmptySelectionError(StochPathError):
    def __init__(self, message, predicted_fraction=None):
        super().__init__(message)
        self.predicted_fraction = predicted_fraction


class EndpointMismatchError(StochPathError, ValueError):
    pass


class UnsupportedFlavorError(StochPathError, ValueError):
    pass


class LoopOrderError(StochPathError):
    """Only tree-level (zero-loop) diagrams are supported."""


class NoRealCurveError(StochPathError, ValueError):
    """Stochastic energy below E_c has no real phase-portrait curve."""


class BurnInError(StochPathError, ValueError):
    pass


class SeriesTruncationWarning(UserWarning):
    """The asymptotic series started growing before the requested order."""


class FeedbackGainWarning(UserWarning):
    """|Delta_1 tau_m| > 1: the linear feedback has no attractors."""
