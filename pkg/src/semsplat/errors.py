"""Exception hierarchy shared across the package.

CLI exit codes: ConfigError -> 2, DataError -> 3, NumericalError -> 4.
"""


class SemsplatError(Exception):
    pass


class ConfigError(SemsplatError):
    """Bad run configuration (unknown keys, invalid values)."""


class DataError(SemsplatError):
    """Bad or missing input data (files, shapes, camera poses)."""


class NumericalError(SemsplatError):
    """Non-finite values encountered during rendering or optimization."""


class InvalidParameterError(NumericalError):
    """A primitive carries a non-finite raw parameter."""


class ContractViolationError(SemsplatError):
    """Mismatched inputs across an operation boundary (shapes, caches)."""


class RenderError(NumericalError):
    """Non-finite intermediate produced by the rasterizer."""


class DegenerateMaskError(SemsplatError):
    """Too few unmasked pixels for a statistic to be defined."""
