"""Exception types raised across the package."""


class GeocrowdError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(GeocrowdError, ValueError):
    pass


class NumericalDomainError(GeocrowdError, ArithmeticError):
    """A numerical kernel could not produce a finite answer."""


class NonFiniteGradientError(NumericalDomainError):
    def __init__(self, index, value):
        self.index = index
        self.value = value
        super().__init__(f"non-finite gradient {value!r} at coordinate {index}")


class StaleCacheError(GeocrowdError, RuntimeError):
    """A forward cache was used after the model it came from changed."""


class TrainingDivergedError(NumericalDomainError):
    def __init__(self, epoch, batch, detail=""):
        self.epoch = epoch
        self.batch = batch
        msg = f"training diverged at epoch {epoch}, batch {batch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class CheckpointError(GeocrowdError, IOError):
    pass


class FormatError(GeocrowdError, ValueError):
    """A data file does not match its declared schema."""
