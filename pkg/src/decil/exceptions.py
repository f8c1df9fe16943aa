"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array shapes or dimensions do not agree."""


class InvalidArchitectureError(ValueError):
    """Layer dimensions cannot describe a network."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}: non-finite loss")


class NotFittedError(ValueError, AttributeError):
    """Estimator used before ``fit``."""


class ExpertFailureError(RuntimeError):
    """Scripted expert could not produce enough successful episodes."""
