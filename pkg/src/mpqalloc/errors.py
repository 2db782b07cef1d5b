"""Exception types shared across the toolkit."""


class MpqError(Exception):
    """Base class for all toolkit errors."""


class TraceError(MpqError, ValueError):
    """A trace violates its invariants or its on-disk format is corrupt."""


class ZeroActivation(MpqError, ValueError):
    """A layer output has a vanishing Gram norm, so ORM is undefined."""

    def __init__(self, message, layer_id=None, timestep=None):
        super().__init__(message)
        self.layer_id = layer_id
        self.timestep = timestep


class Infeasible(MpqError, ValueError):
    """No bit assignment satisfies the size budget."""

    def __init__(self, message, min_bits=None):
        super().__init__(message)
        self.min_bits = min_bits


class InstanceTooLarge(MpqError, ValueError):
    """An exact solver refuses an instance beyond its tabulation guard."""
