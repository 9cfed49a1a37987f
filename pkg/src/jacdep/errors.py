"""Exception hierarchy shared by all modules."""


class JacdepError(Exception):
    """Base class for every error raised by the package."""


class SingularCovariance(JacdepError, ValueError):
    pass


class ImproperMessage(JacdepError, ValueError):
    pass


class ImproperIncoming(ImproperMessage):
    pass


class DimensionMismatch(JacdepError, ValueError):
    pass


class ZeroScale(JacdepError, ValueError):
    pass


class AllZeroWeights(JacdepError, ValueError):
    pass


class EtaOutOfRange(JacdepError, ValueError):
    pass


class AllNegInfinity(JacdepError, ValueError):
    pass


class SupportMismatch(JacdepError, ValueError):
    pass


class MissingPrior(JacdepError, ValueError):
    pass


class MissingScenario(JacdepError, ValueError):
    pass


class NonSquareL(JacdepError, ValueError):
    pass


class NonPositiveDistance(JacdepError, ValueError):
    pass


class NonPSDCorrelation(JacdepError, ValueError):
    pass


class EmptyCodebook(JacdepError, ValueError):
    pass


class ZeroPilotSymbol(JacdepError, ValueError):
    pass


class ConfigMismatch(JacdepError, ValueError):
    pass


class LengthMismatch(JacdepError, ValueError):
    pass


class EmptyInput(JacdepError, ValueError):
    pass


class ConfigError(JacdepError, ValueError):
    """Problem with a configuration file; ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(ConfigError):
    pass


class UnknownKey(ConfigError):
    pass


class RangeError(ConfigError):
    pass


class TrialError(JacdepError, RuntimeError):
    """Wraps a failure inside one Monte Carlo trial."""

    def __init__(self, upp_id, realization_id, cause):
        self.upp_id = upp_id
        self.realization_id = realization_id
        self.cause = cause
        super().__init__(f"trial (upp_id={upp_id}, realization_id={realization_id}) failed: {cause!r}")

    def __reduce__(self):
        # rebuilt from its fields when crossing a process boundary
        return type(self), (self.upp_id, self.realization_id, self.cause)


class RhoOutOfRange(RangeError):
    pass


class IoError(JacdepError, OSError):
    pass
