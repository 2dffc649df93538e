"""Exception types raised across the package."""


class CvarRLError(ValueError):
    pass


class InvalidModel(CvarRLError):
    pass


class InvalidTau(CvarRLError):
    pass


class EmptySamples(CvarRLError):
    pass


class EmptyDataset(CvarRLError):
    pass


class DimensionMismatch(CvarRLError):
    pass


class SingularMatrix(CvarRLError):
    pass


class GridMismatch(CvarRLError):
    pass


class InstanceTooLarge(CvarRLError):
    pass


class ConfigInvalid(CvarRLError):
    pass
