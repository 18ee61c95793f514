"""Exception types shared across the codec."""


class BgvaeError(Exception):
    """Base class for all codec errors."""


class DimensionError(BgvaeError, ValueError):
    """Tensor shape violates an operation's contract."""


class DomainError(BgvaeError, ValueError):
    """Scalar argument outside its mathematical domain."""


class VariantError(BgvaeError, TypeError):
    """Student/teacher variant mismatch."""


class SymbolRangeError(BgvaeError, ValueError):
    """Integer symbol outside the clamped coding alphabet."""


class CodingError(BgvaeError):
    """Entropy encoder rejected its input."""


class DecodeError(BgvaeError):
    """Bitstream payload cannot be decoded."""


class FormatError(BgvaeError):
    """Malformed bitstream container."""


class VersionError(BgvaeError):
    """Checkpoint or bitstream version is incompatible."""


class ConfigError(BgvaeError, ValueError):
    """Invalid training or architecture configuration."""


class EvaluationError(BgvaeError, ValueError):
    """Metric cannot be computed from the given curves."""


class IngestionError(BgvaeError):
    """An input image could not be read or has an unsupported format."""
