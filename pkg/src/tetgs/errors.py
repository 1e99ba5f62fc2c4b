"""Exception types shared across the pipeline."""


class FieldEvaluationError(ValueError):
    """A scalar field produced a non-finite value at a grid vertex."""


class IntegrityError(RuntimeError):
    """A structural guarantee was violated (e.g. a frozen face moved)."""


class StalenessError(RuntimeError):
    """A backward pass was paired with a forward cache from a different scene."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
