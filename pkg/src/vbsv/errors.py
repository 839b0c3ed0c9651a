"""Exception types shared across the package."""


class VBSVError(Exception):
    """Base class for errors raised by vbsv."""


class DimensionError(VBSVError, ValueError):
    pass


class NotPositiveDefiniteError(VBSVError, ArithmeticError):
    """Factorization hit a non-positive pivot at ``index``."""

    def __init__(self, index: int, message: str | None = None):
        self.index = int(index)
        super().__init__(message or f"matrix is not positive definite (pivot {self.index})")


class IterationLimitError(VBSVError, RuntimeError):
    """An iterative solver ran out of iterations.

    ``last`` holds the final iterate and ``diagnostics`` a dict of whatever
    the solver knew when it gave up.
    """

    def __init__(self, message: str, last=None, diagnostics: dict | None = None):
        super().__init__(message)
        self.last = last
        self.diagnostics = diagnostics or {}


class SingularRegressionError(VBSVError, ValueError):
    pass


class FitError(VBSVError, RuntimeError):
    """A fit failed; ``context`` says where (equation index, grid point, iteration)."""

    def __init__(self, message: str, context: dict | None = None):
        super().__init__(message)
        self.context = context or {}


class ConfigError(VBSVError, ValueError):
    pass
