"""Exception hierarchy shared by every subsystem."""


class QuerystreamError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QuerystreamError, ValueError):
    """Tensor shapes do not fit an operation."""


class ConfigError(QuerystreamError, ValueError):
    """A configuration value is invalid or unknown."""


class ContractError(QuerystreamError):
    """A caller violated an operation's precondition."""


class EmptyInputError(ContractError):
    """An attention call received zero keys or tokens."""


class InvariantError(QuerystreamError, ValueError):
    """A value violates its type invariant (e.g. a non-rigid pose)."""


class OrderingError(QuerystreamError, ValueError):
    """Timestamps went backwards or repeated."""


class ParseError(QuerystreamError, ValueError):
    """A file could not be decoded.  ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DivergenceError(QuerystreamError, RuntimeError):
    """Training produced a non-finite loss."""
