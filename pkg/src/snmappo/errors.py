from __future__ import annotations


class SnMappoError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SnMappoError, ValueError):
    """Invalid configuration: unknown key, bad type, violated constraint, dimension mismatch."""


class UsageError(SnMappoError, RuntimeError):
    """An API was called out of order or with malformed arguments."""


class EnvInvariantError(SnMappoError, RuntimeError):
    """An environment produced a state that violates its contract (e.g. no legal action)."""


class NumericError(SnMappoError, ArithmeticError):
    """A loss, gradient or metric became non-finite."""
