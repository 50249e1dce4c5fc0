"""Exception types shared across the benchmark suite."""


class RttBenchError(Exception):
    """Base class for all rttbench errors."""


class PayloadSizeError(RttBenchError):
    """Message payload exceeds the wire format's maximum."""


class MalformedFrameError(RttBenchError):
    """Datagram could not be decoded into a valid frame."""


class UnsupportedQosError(RttBenchError):
    """QoS profile requests a mode this implementation does not support."""


class InvalidEndpointError(RttBenchError):
    """Endpoint address or port is out of range or unparseable."""


class TransportError(RttBenchError):
    """Socket creation or bind failed."""


class StressSpecError(RttBenchError):
    """Stress specification is invalid (e.g. enabled with zero workers)."""


class PartialStartError(RttBenchError):
    """Some load workers failed to spawn; the started ones were rolled back."""


class ExportError(RttBenchError):
    """Time-series export failed; samples are untouched."""


class RtApplyError(RttBenchError):
    """A real-time setting was not applied and strict mode is on."""

    def __init__(self, setting: str, outcome: str, detail: str = ""):
        self.setting = setting
        self.outcome = outcome
        self.detail = detail
        super().__init__(f"rt setting {setting!r} {outcome}" + (f": {detail}" if detail else ""))


class ConfigError(RttBenchError):
    """Experiment matrix file is malformed or violates a constraint.

    Carries the offending line number (0 when the error is not tied to a
    single line) and, for constraint violations, the configuration key.
    """

    def __init__(self, message: str, *, line: int = 0, key: str = ""):
        self.line = line
        self.key = key
        prefix = f"line {line}: " if line else ""
        super().__init__(prefix + message)


class PeerUnreachableError(RttBenchError):
    """Remote control agent could not be reached; distinct from in-run loss."""
