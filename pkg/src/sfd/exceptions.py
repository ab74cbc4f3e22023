"""Exception types shared across the toolkit.

The CLI maps these onto process exit codes (see :mod:`sfd.cli`).
"""


class SFDError(Exception):
    """Base class for toolkit errors."""


class ConfigError(SFDError, ValueError):
    """Invalid or inconsistent configuration."""


class AssetError(SFDError, LookupError):
    """An HRIR, RIR, noise or data asset could not be resolved or read."""

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class NumericalError(SFDError, FloatingPointError):
    """A non-finite value appeared during training or evaluation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
