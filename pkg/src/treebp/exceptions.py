"""Exception hierarchy shared by every treebp module."""


class TreeBPError(Exception):
    """Base class for domain errors. The CLI maps these to exit code 1."""


class ShapeError(TreeBPError, ValueError):
    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class DataFormatError(TreeBPError):
    pass


class CheckpointError(TreeBPError):
    pass


class ConfigMismatchError(TreeBPError):
    pass


class NonFiniteLossError(TreeBPError, FloatingPointError):
    def __init__(self, epoch, step, loss):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step
        self.loss = loss


class UnknownPlanError(TreeBPError, KeyError):
    def __init__(self, name, valid):
        self.name = name
        self.valid = sorted(valid)
        super().__init__(f"unknown plan {name!r}; valid plans: {', '.join(self.valid)}")

    def __str__(self):
        return self.args[0]
