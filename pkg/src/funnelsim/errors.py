"""Exception types shared across the engine."""


class FunnelsimError(Exception):
    """Base class for all engine errors."""


class StateError(FunnelsimError):
    """An operation was applied to an entity in the wrong state."""


class OrderingError(StateError):
    """An operation violated the pipeline/stage ordering rules."""


class CapacityError(FunnelsimError):
    """A resource request exceeds what the backend can provide."""


class UnsatisfiableError(FunnelsimError):
    """A task can never fit on the pilot, regardless of queueing."""


class DispatchError(FunnelsimError):
    """The overlay cannot dispatch work (e.g. a master with no workers)."""


class TraceError(FunnelsimError):
    """An event violated the legal transition graph."""


class ConfigError(FunnelsimError):
    """A configuration document is malformed or inconsistent."""


class WorkerKilled(FunnelsimError):
    """Raised inside a local overlay function to simulate worker death."""


class InputError(FunnelsimError):
    """An input file cannot be parsed.

    ``line`` carries the 1-based line number when known.
    """

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
