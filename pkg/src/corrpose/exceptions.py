"""Exception hierarchy shared by every corrpose module."""


class CorrPoseError(Exception):
    """Base class for all errors raised by corrpose."""


class DegenerateConfigurationError(CorrPoseError, ValueError):
    """Input geometry does not determine a unique solution."""


class PointBehindCameraError(CorrPoseError, ValueError):
    """A point has non-positive depth in the camera frame."""

    def __init__(self, index, depth):
        self.index = int(index)
        self.depth = float(depth)
        super().__init__(
            f"point {self.index} is behind the camera (z = {self.depth:.3g})"
        )


class ZeroDepthError(CorrPoseError, ValueError):
    """Backprojection was requested at a pixel without a surface."""


class InsufficientSupportError(CorrPoseError, ValueError):
    """Too few usable observations survived filtering."""


class NoConsensusError(CorrPoseError, RuntimeError):
    """Robust estimation could not find a consensus set."""


class SingularSystemError(CorrPoseError, ArithmeticError):
    """A linear system is singular or too badly conditioned to solve."""


class NonFiniteResidualError(CorrPoseError, ArithmeticError):
    """A residual became NaN or infinite during optimization."""


class EmptyVisibilityError(CorrPoseError, ValueError):
    """Neither pose has any visible pixel, so VSD is undefined."""


class OutOfViewError(CorrPoseError, ValueError):
    """The object does not project into the image."""
