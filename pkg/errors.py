"""
FreeGibbs Exceptions

One exception per module, all deriving from FreeGibbsError so callers can
catch the whole library at once.
"""

from typing import Any, Dict, Optional


class FreeGibbsError(Exception):
    """Base exception for all FreeGibbs errors."""
    pass


class TracePolyError(FreeGibbsError):
    """Custom exception for trace polynomial algebra errors."""
    pass


class TracePolyParseError(TracePolyError):
    """Raised when potential or observable text cannot be parsed."""

    def __init__(self, message: str, token: str = "", column: int = 0):
        super().__init__(f"{message} at column {column}: {token!r}")
        self.token = token
        self.column = column


class PotentialError(FreeGibbsError):
    """Custom exception for potential construction and evaluation errors."""
    pass


class SamplerError(FreeGibbsError):
    """Raised when a chain fails to tune or mix."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SemigroupError(FreeGibbsError):
    """Custom exception for semigroup (P_t, Q_t, R_t) failures."""
    pass


class CondExpError(FreeGibbsError):
    """Custom exception for conditional expectation failures."""
    pass


class EntropyError(FreeGibbsError):
    """Raised when an entropy or Fisher estimate exceeds its budget."""
    pass


class TransportError(FreeGibbsError):
    """Raised when a transport map cannot be built within budget."""

    def __init__(self, message: str, stage: Optional[int] = None):
        if stage is not None:
            message = f"stage {stage}: {message}"
        super().__init__(message)
        self.stage = stage


class ConfigError(FreeGibbsError):
    """Raised for unparseable or invalid run configuration."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(message + where)
        self.line = line
        self.column = column
