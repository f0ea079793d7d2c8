"""Exception types shared across the simulator."""


class DfedsimError(Exception):
    """Base class for all library errors."""


class DimensionError(DfedsimError):
    """Vector/matrix operands have incompatible shapes."""


class ConfigError(DfedsimError):
    """Invalid or inconsistent run configuration."""


class TopologyError(DfedsimError):
    """Graph construction failed (e.g. could not draw a connected graph)."""


class DataError(DfedsimError):
    """Dataset or sample-index problem."""


class NumericalError(DfedsimError):
    """Iterative numeric routine failed to converge.

    Carries the best estimate produced so far in ``best_estimate``.
    """

    def __init__(self, message, best_estimate=None):
        super().__init__(message)
        self.best_estimate = best_estimate


class DivergenceError(DfedsimError):
    """An optimizer iterate became non-finite."""

    def __init__(self, round_index, client):
        super().__init__(
            f"non-finite iterate at round {round_index}, client {client}"
        )
        self.round_index = round_index
        self.client = client
