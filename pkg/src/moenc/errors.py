class ContractError(ValueError):
    """A caller broke an operation's precondition."""


class DimensionError(ContractError):
    pass


class ConfigurationError(ValueError):
    pass


class DivergenceError(RuntimeError):
    def __init__(self, step: int, last_finite=None):
        self.step = step
        self.last_finite = last_finite
        super().__init__(f"non-finite loss at step {step}; last finite breakdown: {last_finite}")


class CheckpointError(ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass
