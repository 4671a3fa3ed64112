__ALL__ = [
    "NicaError",
    "ConfigError",
    "ManifestVersionError",
    "ShapeMismatchError",
    "OutputExistsError",
    "TensorFileError",
    "NumericalError",
    "CholeskyError",
    "GammaQuantileError",
    "NonFiniteError",
    "EvaluationError",
    "DimensionError",
]


class NicaError(Exception):
    """
    The base exception that all other tpnica exceptions inherit from.
    To catch any of the more specific errors raised by this package,
    catch this one and handle appropriately.

    This exception is not raised directly, it is in place strictly
    as a way to catch all `tpnica` exceptions.
    """

    pass


class ConfigError(NicaError, ValueError):
    pass


class ManifestVersionError(ConfigError):
    pass


class ShapeMismatchError(ConfigError):
    pass


class OutputExistsError(ConfigError, FileExistsError):
    pass


class TensorFileError(NicaError, ValueError):
    pass


class NumericalError(NicaError, ArithmeticError):
    pass


class CholeskyError(NumericalError):
    """
    Raised when a matrix that should be positive definite fails to factorize.
    The message carries the diagnostics collected at the failure point
    (matrix size, smallest eigenvalue, diagonal range).
    """

    pass


class GammaQuantileError(NumericalError):
    pass


class NonFiniteError(NumericalError):
    pass


class EvaluationError(NicaError, ValueError):
    pass


class DimensionError(NicaError, ValueError):
    pass
