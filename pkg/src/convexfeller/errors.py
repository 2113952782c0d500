"""Exception hierarchy.

Every error raised by the library derives from :class:`ModelError`. The CLI
maps the three families below onto exit codes (see ``cli.EXIT_CODES``).
"""


class ModelError(Exception):
    """Base class for all library errors."""


class ConfigError(ModelError):
    """Invalid configuration document. ``field`` is a dotted path."""

    def __init__(self, message, field=None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)


class NumericalError(ModelError):
    """A computation could not proceed with the requested discretization."""


class CheckFailure(ModelError):
    """A verified property (growth bound, axiom, ...) does not hold."""


# -- model definition -------------------------------------------------------

class UnsupportedVariant(ModelError):
    pass


class DomainError(ModelError):
    pass


class GridMismatch(ModelError):
    pass


class OffDomain(ModelError):
    pass


class OffDomainControl(OffDomain):
    pass


class IncompatiblePrefix(ModelError):
    pass


class EmptyControlSet(ModelError):
    pass


# -- numerics ---------------------------------------------------------------

class NonFinite(NumericalError):
    pass


class SingularSigma(NumericalError):
    pass


class UnstableStep(NumericalError):
    pass


class CflViolation(NumericalError):
    pass


class NonmonotoneWeights(NumericalError):
    pass


# -- verified properties ----------------------------------------------------

class EllipticityFailure(CheckFailure):
    pass


class SigmaBoundViolation(CheckFailure):
    pass


class GrowthViolation(CheckFailure):
    pass


class AxiomViolation(CheckFailure):
    def __init__(self, axiom, node, magnitude):
        self.axiom = axiom
        self.node = node
        self.magnitude = magnitude
        super().__init__(f"{axiom} violated at node {node} by {magnitude:.3e}")
