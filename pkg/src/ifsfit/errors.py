"""Exception types raised across the package."""


class IFSError(Exception):
    """Base class for all package errors."""


class DegenerateSystem(IFSError):
    """Every transform has zero determinant, so selection probabilities are undefined."""


class NonFiniteTrajectory(IFSError):
    """The chaos game produced a NaN/Inf coordinate."""


class NonFinitePoint(IFSError):
    """A point handed to the renderer is not finite."""


class NonFiniteGradient(IFSError):
    """Backpropagation produced a NaN/Inf value.

    When raised from the training loop, ``last_system`` holds the last parameters
    for which every gradient was finite and ``step`` the step that failed.
    """

    def __init__(self, message, *, last_system=None, step=None, loss_curve=None, grad_norms=None):
        super().__init__(message)
        self.last_system = last_system
        self.step = step
        self.loss_curve = list(loss_curve) if loss_curve is not None else []
        self.grad_norms = list(grad_norms) if grad_norms is not None else []


class ShapeMismatch(IFSError, ValueError):
    """Two images (or an image and a gradient) disagree in shape."""


class UnsupportedFormat(IFSError):
    """The file is not a format we can decode."""


class CorruptFile(IFSError):
    """The file claims a supported format but its contents are inconsistent."""
