"""Exception types shared across the package.

Everything derives from :class:`CfsignalError` so callers can catch the
package's failures with a single except clause; the concrete classes also
subclass the closest builtin so generic code keeps working.
"""

from __future__ import annotations


class CfsignalError(Exception):
    """Base class for all package-specific errors."""


class InvalidActionError(CfsignalError, ValueError):
    """An action / phase id outside the configured action space."""


class EpisodeFinishedError(CfsignalError, RuntimeError):
    """step() called on a state whose clock already reached max_steps."""


class IncompatibleSnapshotError(CfsignalError, ValueError):
    """Snapshot restored against a simulator with a different structural config."""


class SnapshotFormatError(CfsignalError, ValueError):
    """Serialized snapshot/checkpoint bytes are malformed or version-mismatched."""


class ShapeError(CfsignalError, ValueError):
    """Array shape incompatible with the operation."""


class StateError(CfsignalError, RuntimeError):
    """Operation requires internal state that is not present (e.g. backward
    before forward)."""


class DomainError(CfsignalError, ValueError):
    """Numeric input outside the mathematical domain (e.g. kl_div on a
    non-normalized vector)."""


class NoDataError(CfsignalError, ValueError):
    """A buffer or dataset required by the operation is empty."""


class NotReadyError(CfsignalError, RuntimeError):
    """A model is used before it was trained/fitted."""


class NotFoundError(CfsignalError, KeyError):
    """A referenced artifact (run directory entry, collision id) does not exist."""


class ConfigError(CfsignalError, ValueError):
    """Invalid or inconsistent configuration."""
