"""Exception classes shared across the package."""


class PPPError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ContractViolation(PPPError):
    pass


class ConfigurationError(PPPError):
    exit_code = 2


class InsufficientEnrollmentError(PPPError):
    pass


class PruningDefectError(PPPError):
    exit_code = 3


class IngestionError(PPPError):
    pass


class DivergenceError(PPPError):
    pass


class FormatVersionError(PPPError):
    pass
