"""Exception hierarchy shared by all modules."""


class ToruskamError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(ToruskamError, ValueError):
    pass


class DomainError(ToruskamError, ValueError):
    """Input outside the domain of a formula (e >= 1, |G| >= L, unbound orbit...)."""


class SingularityError(ToruskamError):
    """Two bodies (or a body and the Sun) closer than the collision floor."""


class ResonanceError(ToruskamError):
    """A retained mode k has |k . omega| below the small-divisor floor."""

    def __init__(self, k, value):
        self.k = tuple(k)
        self.value = value
        super().__init__(f"small divisor |k.omega| = {abs(value):.3e} at k = {self.k}")


class InsufficientDecayError(ToruskamError):
    pass


class DegenerateFrameError(ToruskamError):
    """DK^T DK is numerically singular somewhere on the grid."""


class DegeneracyError(ToruskamError):
    """Singular supertorsion."""


class TorsionDegeneracyError(DegeneracyError):
    """Singular averaged torsion <T> (expected at mu = 0)."""


class DivergenceError(ToruskamError):
    pass


class ContinuationError(ToruskamError):
    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class EstimateError(ToruskamError):
    pass


class StiffnessError(ToruskamError):
    pass


class NeighborhoodError(ToruskamError):
    pass


class InfeasibleSchemeError(ToruskamError):
    pass
