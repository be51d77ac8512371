"""Exception types shared across the package."""


class FpgradError(Exception):
    """Base class for all package errors."""


class SingularMatrixError(FpgradError):
    """A direct solve hit a pivot below the singularity threshold."""


class NoConvergenceError(FpgradError):
    """An iterative matrix reduction exceeded its sweep budget."""


class InvalidConstantsError(FpgradError):
    """Strong convexity / smoothness / regularization constants out of range."""


class DivergedError(FpgradError):
    """Lower-level iteration blew up (state norm above the guard threshold)."""


class NotSymmetricError(FpgradError):
    """Plain CG requested on a problem that does not declare a symmetric map Jacobian."""


class CgBreakdownError(FpgradError):
    """CG detected a non-positive curvature direction (operator not SPD)."""


class InvalidLabelsError(FpgradError):
    """Classification targets outside {-1, +1}."""


class ConfigError(FpgradError):
    """Experiment configuration failed validation."""


class SchemaError(FpgradError):
    """A CSV file is empty or missing required columns."""
