"""Exception hierarchy shared across the toolkit."""


class ThermoDepthError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ThermoDepthError, ValueError):
    """A configuration field is missing, malformed or out of range."""


class StabilityViolation(ThermoDepthError):
    """Explicit scheme would be unstable (Fourier number above 0.5)."""


class InvalidDepth(ThermoDepthError, ValueError):
    pass


class CalibrationError(ThermoDepthError, ValueError):
    pass


class TooShort(ThermoDepthError, ValueError):
    pass


class DegenerateFit(ThermoDepthError):
    pass


class NotDivisible(ThermoDepthError, ValueError):
    pass


class NonFinite(ThermoDepthError, FloatingPointError):
    """NaN or Inf encountered; ``context`` names where it happened."""

    def __init__(self, message, context=None):
        super().__init__(message)
        self.context = dict(context or {})


class EmptyBatch(ThermoDepthError, ValueError):
    pass


class LambdaOutOfRange(ThermoDepthError, ValueError):
    pass


class TooSmall(ThermoDepthError, ValueError):
    pass


class ZeroTarget(ThermoDepthError, ValueError):
    pass


class ZeroVariance(ThermoDepthError, ValueError):
    pass


class UnknownDepth(ThermoDepthError, KeyError):
    pass
