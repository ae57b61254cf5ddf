"""Shared exception types.

The CLI maps these onto exit codes: ConfigError and its subclasses are
user/validation errors (exit 2), FormatError marks unreadable or corrupt
input files (exit 1).
"""


class VoiceprintError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(VoiceprintError):
    """Invalid configuration or violated input invariant."""


class FormatError(VoiceprintError):
    """Malformed or unsupported file content."""
