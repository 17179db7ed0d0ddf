"""Exception hierarchy.

Validation problems (bad input files, bad configuration, infeasible bound
specifications) derive from :class:`ValidationError`; failures that only show
up once nuisances are fitted derive from :class:`EstimationError`.  The CLI
maps the first family to exit code 1 and the second to exit code 2.
"""


class BridgeError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(BridgeError, ValueError):
    pass


class EstimationError(BridgeError, RuntimeError):
    pass


# --- data ingestion -------------------------------------------------------

class MissingColumn(ValidationError):
    pass


class InvalidTreatment(ValidationError):
    pass


class InvalidOutcome(ValidationError):
    pass


class StarRowHasOutcome(ValidationError):
    pass


class EmptySample(ValidationError):
    pass


class ConfigError(ValidationError):
    """Configuration problem; ``pointer`` is a JSON pointer to the bad value."""

    def __init__(self, message, pointer=""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer or "/"


# --- bounds ---------------------------------------------------------------

class ConvexityViolation(ValidationError):
    pass


class PseudoRiskOutOfRange(ValidationError):
    pass


class OrderViolation(ValidationError):
    def __init__(self, message, w=None):
        super().__init__(message)
        self.w = w


# --- estimation -----------------------------------------------------------

class SingleArmTrial(EstimationError):
    pass


class ZeroDenominator(EstimationError):
    def __init__(self, message, w=None):
        super().__init__(message)
        self.w = w


class ZeroOmega(EstimationError):
    pass


class InfeasibleMu(EstimationError):
    pass


class NoObservedControls(EstimationError):
    pass


class B5NotDeclared(EstimationError):
    pass
