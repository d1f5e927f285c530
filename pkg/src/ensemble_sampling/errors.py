"""Exception hierarchy shared by every module of the toolkit."""


class BanditError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(BanditError, ValueError):
    pass


class RankError(BanditError, ValueError):
    """Arm features do not span the ambient space."""


class ConvergenceError(BanditError, RuntimeError):
    """An iterative solver hit its iteration cap.

    The best iterate found so far is kept on ``best`` so callers may still
    use it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DecompositionError(BanditError, ValueError):
    """Matrix is not symmetric positive definite."""


class DivergenceError(BanditError, FloatingPointError):
    """Gradient descent produced non-finite parameters or loss."""


class StateError(BanditError, RuntimeError):
    pass


class SpecError(BanditError, ValueError):
    """Experiment spec failed to parse or validate.

    ``field`` names the offending key (dotted path) for validation errors;
    ``line`` and ``column`` are 1-based and set for syntax errors.
    """

    def __init__(self, message, field=None, line=None, column=None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column
