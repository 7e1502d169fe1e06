"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: config and data problems exit
with 2, checkpoint incompatibilities with 3, and runtime verification
failures (numeric faults, gradient-check breaches, API misuse) with 1.
"""


class ResLinkError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ResLinkError):
    """Tensor rank/extent mismatch; the message names both shapes involved."""


class ConfigError(ResLinkError):
    """Invalid or inconsistent configuration value; names the field."""


class DataError(ResLinkError):
    """Bad dataset contents: unreadable files, empty classes, label misuse."""


class NumericFaultError(ResLinkError):
    """Non-finite values detected; names the layer or epoch/batch."""


class CheckpointError(ResLinkError):
    """Checkpoint file is malformed or incompatible with this build."""


class UsageError(ResLinkError):
    """API called out of order, e.g. backward after an inference forward."""
