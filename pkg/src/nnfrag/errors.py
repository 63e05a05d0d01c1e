"""Exception types raised across the toolkit."""


class NNFragError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(NNFragError, ValueError):
    pass


class InvalidClass(NNFragError, ValueError):
    pass


class SingularHessian(NNFragError, ArithmeticError):
    pass


class RequiresSmoothActivation(NNFragError, ValueError):
    pass


class Divergence(NNFragError, ArithmeticError):
    pass


class DegenerateSaliency(NNFragError, ValueError):
    pass


class UnsupportedLayer(NNFragError, TypeError):
    pass


class LengthMismatch(NNFragError, ValueError):
    pass


class DegenerateInput(NNFragError, ValueError):
    pass


class InvalidK(NNFragError, ValueError):
    pass


class NonFiniteGradient(NNFragError, ArithmeticError):
    pass


class NoConvergence(NNFragError, ArithmeticError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateDirection(NNFragError, ValueError):
    pass


class ZeroDerivative(NNFragError, ZeroDivisionError):
    pass


class NotOrthogonal(NNFragError, ValueError):
    pass


class UnsupportedActivation(NNFragError, ValueError):
    pass


class BadMagic(NNFragError, ValueError):
    pass


class TruncatedFile(NNFragError, ValueError):
    pass


class LabelOutOfRange(NNFragError, ValueError):
    pass
