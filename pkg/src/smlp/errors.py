"""Exception types shared across the package."""


class SMLPError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SMLPError, ValueError):
    pass


class DivisibilityError(ShapeError):
    pass


class AutogradError(SMLPError, RuntimeError):
    pass


class StaleTapeError(AutogradError):
    pass


class DegenerateBatchError(SMLPError, ValueError):
    pass


class ConfigError(SMLPError, ValueError):
    pass


class CapacityError(SMLPError, ValueError):
    pass


class TrainingDivergenceError(SMLPError, FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss!r} at step {step}")
        self.step = step
        self.loss = loss


class CheckpointError(SMLPError, IOError):
    pass
