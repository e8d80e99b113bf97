"""Exception types raised across the package."""


class LodaError(Exception):
    """Base class for all package errors."""


class ShapeError(LodaError, ValueError):
    pass


class ConfigError(LodaError, ValueError):
    pass


class ContractError(LodaError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DegenerateBatchError(ContractError):
    """Correlation undefined because a score vector is constant."""


class InputError(LodaError, ValueError):
    pass


class ManifestError(LodaError, ValueError):
    pass


class WeightFileError(LodaError, IOError):
    pass
