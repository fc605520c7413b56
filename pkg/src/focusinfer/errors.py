"""Typed error hierarchy for the engine.

Every failure the engine can diagnose raises a subclass of EngineError so
callers (and the CLI) can distinguish bad input from internal bugs. The
container parser in particular must map every malformed input onto one of
these types instead of letting struct/UnicodeDecodeError escape.
"""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all errors raised deliberately by this package."""


class ConfigError(EngineError):
    """A configuration value is out of its documented range."""


class UsageError(EngineError):
    """An operation was called with arguments that make no sense."""


class ShapeError(EngineError):
    """Tensor dimensions do not line up for the requested operation."""


class BoundsError(EngineError):
    """An index is outside the valid range for the target structure."""


class ScheduleError(EngineError):
    """A decode schedule constraint was violated."""


class CacheMissError(EngineError):
    """A cache read touched a position that was never written."""


class DegenerateAttentionError(EngineError):
    """Attention was requested over an empty context."""


class ContainerError(EngineError):
    """Base class for tensor-container parse failures."""


class MagicError(ContainerError):
    """The file does not start with the expected magic bytes."""


class VersionError(ContainerError):
    """The container declares an unsupported format version."""


class TruncationError(ContainerError):
    """The file ends before the declared payload does."""


class HeaderError(ContainerError):
    """A tensor header is malformed (name, rank, or dims)."""


class PayloadError(ContainerError):
    """A tensor payload is inconsistent with its declared dims."""
