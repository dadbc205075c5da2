"""Exception hierarchy shared by the library and the CLI."""


class IPANeRFError(Exception):
    """Base class for all package errors."""


class DatasetFormatError(IPANeRFError):
    """A scene directory or transforms file is malformed or incomplete."""


class ConfigError(IPANeRFError, ValueError):
    """Invalid configuration or command-line argument."""


class TrainingDivergenceError(IPANeRFError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, iteration: int, loss: float, stage: str = "train"):
        self.iteration = iteration
        self.loss = loss
        self.stage = stage
        super().__init__(f"{stage}: non-finite loss {loss!r} at iteration {iteration}")


class AttackDivergenceError(TrainingDivergenceError):
    """Loss of the attack copy became non-finite."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(iteration, loss, stage="attack")


class StageError(IPANeRFError, RuntimeError):
    """Wraps an error raised inside one stage of the attack loop."""

    def __init__(self, epoch: int, stage: str, cause: BaseException):
        self.epoch = epoch
        self.stage = stage
        self.cause = cause
        super().__init__(f"epoch {epoch}, stage {stage!r}: {cause}")


class IncompleteRunError(IPANeRFError):
    """A run directory lacks artifacts required by a command."""

    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("incomplete run directory, missing: " + ", ".join(self.missing))
