"""Structured error types.

Every failure the library can signal carries a stable ``category`` slug so
the CLI can emit machine-readable error lines and map failures to exit codes.
"""


class VladError(Exception):
    """Base class for all library errors."""

    category = "error"


class DimensionMismatchError(VladError):
    category = "dimension-mismatch"


class NonFiniteInputError(VladError):
    category = "non-finite-input"


class ConfigError(VladError):
    category = "bad-config"


class FileAccessError(VladError):
    """Underlying OS-level I/O failure (missing file, permissions, ...)."""

    category = "io-failure"


class FeatureFileError(VladError):
    category = "feature-file"


class BadMagicError(FeatureFileError):
    category = "bad-magic"


class BadVersionError(FeatureFileError):
    category = "bad-version"


class SizeMismatchError(FeatureFileError):
    category = "size-mismatch"


class ManifestError(VladError):
    category = "bad-manifest"


class CheckpointError(VladError):
    category = "bad-checkpoint"


class ChecksumError(CheckpointError):
    category = "checksum-mismatch"
