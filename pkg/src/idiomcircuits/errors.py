"""Exception hierarchy. Every error the CLI can report derives from CircuitError."""


class CircuitError(Exception):
    """Base class for all package errors."""


class ConfigError(CircuitError, ValueError):
    """Invalid model configuration or experiment specification."""


class ContainerError(CircuitError):
    """Problem reading or writing a tensor container."""


class HeaderError(ContainerError):
    """Container header is truncated, not valid JSON, or missing fields."""


class ShapeError(ContainerError):
    """A tensor is missing, unexpected, or has the wrong shape or dtype."""


class NonFiniteError(ContainerError):
    """A tensor contains NaN or infinite entries."""


class TokenizationError(CircuitError, ValueError):
    def __init__(self, text, char_offset):
        self.text = text
        self.char_offset = char_offset
        self.byte_offset = len(text[:char_offset].encode("utf-8"))
        super().__init__(
            f"no vocabulary entry matches text at byte offset {self.byte_offset}: "
            f"{text[char_offset:char_offset + 10]!r}"
        )


class SequenceTooLongError(CircuitError, ValueError):
    """Token count exceeds the model's max_seq."""


class ZeroNormError(CircuitError, ArithmeticError):
    """Cosine requested for a zero vector."""


class PatchError(CircuitError, ValueError):
    """Patch set or patched run is inconsistent with the graph."""


class IncompatibleCircuitsError(CircuitError, ValueError):
    """Circuits cannot be merged or compared."""


class FixtureError(CircuitError):
    """Planted fixture specification cannot be realised."""


class OracleError(CircuitError):
    """Brute-force oracle refused to run (universe too large)."""


class AnalysisError(CircuitError, ValueError):
    """Analysis requested on an input it is not defined for."""
