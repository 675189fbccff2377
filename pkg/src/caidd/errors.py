"""Exception types shared across the package."""


class CaiddError(Exception):
    """Base class for all package errors."""


class ConfigError(CaiddError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class DimensionError(CaiddError, ValueError):
    """Array shapes or sizes that do not fit together."""


class ContractError(CaiddError, ValueError):
    """A call that violates an operation's preconditions."""


class NumericError(CaiddError, ArithmeticError):
    """Non-finite values or numerically unstable inputs."""


class IntegrityError(CaiddError):
    """Corrupt or tampered checkpoint file."""


class VersionError(CaiddError):
    """Checkpoint format version not supported by this build."""
