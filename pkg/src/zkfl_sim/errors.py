"""Exception hierarchy shared by every layer of the simulator."""


class SimulationError(Exception):
    """Base class for all simulator errors."""


class InvalidState(SimulationError):
    pass


class DuplicateBlock(SimulationError):
    pass


class DanglingParent(SimulationError):
    pass


class RevokedParent(SimulationError):
    pass


class NotFound(SimulationError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class CannotRevokeConfirmed(SimulationError):
    pass


class InsufficientHistory(SimulationError):
    pass


class WrongPhase(SimulationError):
    pass


class DuplicateSubmission(SimulationError):
    pass


class CannotEscrow(SimulationError):
    pass


class NoOp(SimulationError):
    """Raised when an operation is asked to act on nothing."""


class EmptyDataset(SimulationError):
    pass


class EmptyBatch(SimulationError):
    pass


class ConfigError(SimulationError):
    """Invalid scenario configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class IoError(SimulationError, OSError):
    pass
