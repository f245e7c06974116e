"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: bad counts, mismatched shapes, missing fields."""


class ProtocolError(RuntimeError):
    """A protocol invariant was violated at runtime (e.g. empty model queue)."""


class NumericFaultError(ArithmeticError):
    """A benign computation produced NaN/Inf where finite values are required."""


class IdxFormatError(ValueError):
    """Malformed IDX file. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset
