"""Exception hierarchy shared by the JPPO scripts."""


class JPPOError(Exception):
    """Base class for every error raised by the simulator."""


class ConfigError(JPPOError, ValueError):
    """Invalid configuration value or file.

    Args:
        message: Human readable description
        field: Dotted path of the offending key, when known
        line: 1-based line number in the YAML source, when known
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        super().__init__(message)

    def __str__(self):
        base = super().__str__()
        where = []
        if self.line is not None:
            where.append(f"line {self.line}")
        if self.field:
            where.append(f"field {self.field}")
        if where:
            return f"{base} ({', '.join(where)})"
        return base


class InfeasibleConfigError(JPPOError):
    """No action can satisfy the constraints, even under best-case fading."""


class OutageError(JPPOError):
    """The link carries no data (zero rate) at the requested power."""


class EnvStateError(JPPOError):
    """Environment used out of order (step before reset, or past the horizon)."""


class ShapeMismatchError(JPPOError, ValueError):
    """Array dimensions do not match the network or parameter layout."""


class CalibrationError(JPPOError):
    """Timing data cannot determine the compute profile."""


class MetricsSchemaError(JPPOError):
    """A metrics record does not match its declared schema."""


class BridgeError(JPPOError):
    """Failure talking to the external compression/scoring service."""


class BridgeTimeoutError(BridgeError):
    """The service did not answer within the configured timeout."""


class BridgeResponseError(BridgeError):
    """The service answered with an unusable payload."""
