"""Exception hierarchy shared by all modules."""


class ColorShapeError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(ColorShapeError, ValueError):
    """An argument is outside its admissible range."""


class ParseError(ColorShapeError, ValueError):
    """A file could not be parsed."""


class ValidationError(ColorShapeError, ValueError):
    """Data violates an invariant (non-finite value, wrong shape, ...)."""


class ConstructionError(ColorShapeError, RuntimeError):
    """The Laplacian could not be assembled for the given cloud."""


class SolverError(ColorShapeError, RuntimeError):
    """The eigensolver did not converge."""


class CalibrationError(ColorShapeError, RuntimeError):
    """Control limits could not be calibrated."""


class ConfigError(ColorShapeError, ValueError):
    """A study configuration file is invalid."""
