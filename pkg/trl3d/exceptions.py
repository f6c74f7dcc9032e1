"""
Exception hierarchy for the trl3d app.
"""


class Trl3dError(Exception):
    """Base class for every error raised by the library."""


class ShapeError(Trl3dError, ValueError):
    """Operand shapes are incompatible."""


class GradientTapeError(Trl3dError, RuntimeError):
    """Backward pass requested on a loss that cannot be differentiated."""


class NumericError(Trl3dError, ArithmeticError):
    """An operation produced a non-finite value from finite inputs."""


class GeometryError(Trl3dError, ValueError):
    """Invalid camera geometry, e.g. a point behind the camera."""


class ConfigError(Trl3dError, ValueError):
    """A run configuration is malformed or names an unknown key."""


class DatasetError(Trl3dError, IOError):
    """A dataset on disk is missing, corrupt or of an unknown version."""


class CheckpointError(Trl3dError, IOError):
    """A checkpoint file is corrupt or does not fit the model."""


class MetricError(Trl3dError, ValueError):
    """Evaluation inputs are degenerate or out of range."""
