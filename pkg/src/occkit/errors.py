"""Exception types shared across occkit."""


class OccKitError(Exception):
    """Base class for all occkit errors."""


class ConfigError(OccKitError, ValueError):
    """Invalid grid spec, extent or pipeline configuration."""


class ContractError(OccKitError, ValueError):
    """An operation was called with inputs violating its preconditions."""


class GenerationError(OccKitError, RuntimeError):
    """Scene sampling could not satisfy its constraints."""


class DivergenceError(OccKitError, RuntimeError):
    """Optimisation produced a non-finite loss."""

    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss
