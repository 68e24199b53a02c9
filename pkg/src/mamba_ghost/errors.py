"""Exception hierarchy shared across the package."""


class GhostError(Exception):
    """Base class for every error raised by mamba_ghost."""


class DimensionError(GhostError, ValueError):
    pass


class NumericError(GhostError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class ParameterError(GhostError, ValueError):
    pass


class CalibrationError(GhostError, ValueError):
    """Calibration data is missing, empty or malformed."""


class FormatError(GhostError, ValueError):
    """A model, mask or score file failed validation."""


class InstabilityError(GhostError, ValueError):
    pass
