"""Exception hierarchy shared by all mtair modules."""


class MtairError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MtairError, ValueError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(MtairError, ValueError):
    """Network or run configuration violates an invariant."""


class FormatError(MtairError, ValueError):
    """Weight file is malformed (magic, version, table, or CRC)."""


class NonFiniteError(MtairError, FloatingPointError):
    """A kernel produced NaN or Inf; message names the offending site."""


class CheckFailure(MtairError, AssertionError):
    """An invariant or oracle-equivalence check did not hold."""
