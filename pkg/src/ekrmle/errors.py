"""Exception hierarchy.

Validation problems (bad shapes, violated preconditions) derive from
``ValueError``; failures that arise while computing derive from
``ArithmeticError``.  The command line maps the two families to distinct
exit codes.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class UnsupportedOperatorError(ValidationError):
    """Operation needs a linear operator with a materializable matrix."""


class RankError(ValidationError):
    """Requested order exceeds the usable numerical rank."""

    def __init__(self, message, max_rank=None):
        super().__init__(message)
        self.max_rank = max_rank


class NumericalError(ArithmeticError):
    """A factorization or iteration failed numerically."""


class DivergenceError(NumericalError):
    """Non-finite values appeared during an ensemble iteration."""

    def __init__(self, message, iteration=None, particle=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.particle = particle
        self.trace = trace


class InstabilityError(NumericalError):
    """Time stepping produced non-finite states or is not Euler-stable."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
