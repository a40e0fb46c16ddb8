"""Exception types raised across the package.

Each error also carries an ``exit_code`` used by the command-line front end:
2 for configuration problems, 3 for data problems.
"""


class StimDecodeError(Exception):
    """Base class for all package errors."""

    kind = "error"
    exit_code = 4


class ConfigError(StimDecodeError, ValueError):
    kind = "config"
    exit_code = 2


class DataError(StimDecodeError, ValueError):
    kind = "data"
    exit_code = 3


class InvalidBandError(ConfigError):
    kind = "invalid-band"


class InvalidOrderError(ConfigError):
    kind = "invalid-order"


class InvalidRatioError(ConfigError):
    kind = "invalid-ratio"


class InvalidExponentError(ConfigError):
    kind = "invalid-exponent"


class InvalidLagError(ConfigError):
    kind = "invalid-lag"


class PlanError(ConfigError):
    kind = "plan"


class InsufficientLengthError(DataError):
    kind = "insufficient-length"


class ZeroVarianceError(DataError):
    kind = "zero-variance"


class ShapeError(DataError):
    kind = "shape"


class SingularSystemError(DataError):
    kind = "singular-system"


class NoWindowsError(DataError):
    kind = "no-windows"


class CompatibilityError(DataError):
    kind = "compatibility"


class SchemaError(DataError):
    kind = "schema"


class CorruptDatasetError(DataError):
    kind = "corrupt-dataset"


class MissingFileError(DataError, FileNotFoundError):
    kind = "missing-file"
