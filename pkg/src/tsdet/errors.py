"""Shared exception types."""


class ValidationError(ValueError):
    """Input data violates a documented invariant or schema rule."""


class ManifestError(ValidationError):
    """Manifest file is malformed or fails validation."""


class BackendError(RuntimeError):
    """External detector backend failed, timed out, or broke protocol."""
