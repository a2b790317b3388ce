"""Exception types shared across the simulator.

All of these derive from ValueError so that callers who do not care about
the fine-grained category can catch the builtin.  The CLI maps them to
exit codes.
"""


class MimoschedError(ValueError):
    """Base class for all simulator errors."""


class ConfigError(MimoschedError):
    """Invalid dimensions, parameters or experiment configuration."""


class InsufficientDataError(MimoschedError):
    """A sequence is too short for the requested operation."""


class SingularSelectionError(MimoschedError):
    """The selected CSI columns are (numerically) rank deficient."""


class NoBeneficiaryError(MimoschedError):
    """Power allocation requested but no user has positive weight and gain."""


class UnsupportedModelError(MimoschedError):
    """Operation not defined for the given CSI model."""
