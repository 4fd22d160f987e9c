"""Exception hierarchy shared by every module."""


class ModnoError(Exception):
    """Base class for all package errors."""


class ShapeError(ModnoError, ValueError):
    """Array shapes are inconsistent with each other or with a model."""


class ConfigError(ModnoError, ValueError):
    """A configuration value is out of its valid range."""


class SolverDivergenceError(ModnoError, RuntimeError):
    """A PDE integration blew up or lost resolution.

    Carries the equation name and the time reached so callers can decide
    whether to resample the initial condition.
    """

    def __init__(self, equation, time_reached, reason="blow-up"):
        self.equation = equation
        self.time_reached = float(time_reached)
        self.reason = reason
        super().__init__(f"{equation}: {reason} at t={self.time_reached:.6g}")


class DegenerateTargetError(ModnoError, ValueError):
    """Relative error requested against a zero-norm target."""


class StageError(ModnoError, RuntimeError):
    """An experiment stage failed; ``stage`` names which one."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class TrainingDivergenceError(ModnoError, FloatingPointError):
    """A training loss became non-finite; the learning rate is likely too large."""
