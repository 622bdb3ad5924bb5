"""Exception taxonomy shared across the package."""


class ParameterError(ValueError):
    """A spec or argument violates a declared invariant."""


class InvalidStateError(ValueError):
    """A phase-space point contains non-finite entries."""


class SingularityError(ValueError):
    """A configuration touches the collision set.

    Attributes:
        pair: offending particle indices ``(i, j)``, with ``j == -1`` meaning
            the fixed singularity at the origin (single-particle models).
        distance: the offending separation.
    """

    def __init__(self, message, pair=None, distance=None):
        super().__init__(message)
        self.pair = pair
        self.distance = distance


class StepRejected(Exception):
    """Signal consumed by the adaptive driver: a step left the domain."""


class IntegrationFailure(RuntimeError):
    """Persistent step rejection; carries the last state and diagnostics."""

    def __init__(self, message, t=None, state=None, diagnostics=None):
        super().__init__(message)
        self.t = t
        self.state = state
        self.diagnostics = diagnostics or {}


class ExperimentFailure(RuntimeError):
    """An experiment-level gate failed; carries a census dictionary."""

    def __init__(self, message, census=None):
        super().__init__(message)
        self.census = census or {}
