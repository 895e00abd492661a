"""Shared exception types."""


class ConfigurationError(ValueError):
    """A config object or call was built with invalid settings."""


class ContractError(ValueError):
    """An input violates an operation's shape/range contract."""


class NumericError(ArithmeticError):
    """A computation hit non-finite values or an ill-conditioned matrix."""


class ManifestError(ValueError):
    """A dataset manifest file is missing, malformed, or inconsistent."""


class TrainingDiverged(RuntimeError):
    """A training loss became non-finite; a diagnostic snapshot was written."""
