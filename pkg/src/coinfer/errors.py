"""Exception types shared across the package."""

from __future__ import annotations


class CoinferError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CoinferError):
    """Invalid configuration, manifest, or data file.

    Raised by every loader/validator; maps to CLI exit code 2.
    """


class ProtocolError(CoinferError):
    """Malformed or inconsistent wire-protocol data."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TransportError(CoinferError):
    """Network-level failure (connect, timeout, premature close)."""
