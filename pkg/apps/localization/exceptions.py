"""
Domain errors for the localization services.

Management commands map these onto CommandError exit codes.
"""


class LocalizationError(Exception):
    """Base class for every error raised by apps.localization services"""


class InvalidInputError(LocalizationError, ValueError):
    """Non-finite, unnormalized or otherwise invalid numeric input"""


class DegenerateBoxError(InvalidInputError):
    """Edge distances that do not span a positive-area box"""


class ConfigurationError(LocalizationError, ValueError):
    """Invalid hyperparameters or run configuration"""


class ShapeError(LocalizationError, ValueError):
    """Array shapes that do not line up"""


class BinIndexError(LocalizationError, IndexError):
    """Bin or prediction index outside its valid range"""


class CostMatrixParseError(LocalizationError, ValueError):
    """Cost matrix CSV that is ragged, empty or non-numeric"""


class DivergenceError(LocalizationError):
    """Training produced a non-finite loss"""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
