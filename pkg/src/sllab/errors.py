"""Shared exception types."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class DataError(ValueError):
    """Corpus or log file failed validation."""


class ScheduleError(ValueError):
    """Stream schedule is infeasible for the available records."""


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated, or has the wrong magic."""


class JudgeError(RuntimeError):
    """A judge call failed or returned an invalid verdict."""


class TrainingDiverged(ArithmeticError):
    """Training hit a non-finite loss; carries diagnostics."""

    def __init__(self, step: int, loss_history: list[float]):
        self.step = step
        self.loss_history = loss_history
        super().__init__(
            f"non-finite training loss at step {step}; "
            f"last losses: {[round(x, 4) for x in loss_history[-5:]]}"
        )
