"""Exception types shared across the package.

The CLI maps these onto exit codes (data errors -> 3, numerical
failures -> 4), so library code should raise the most specific one.
"""


class DataError(ValueError):
    """Malformed, inconsistent, or out-of-contract input data."""


class NumericalError(RuntimeError):
    """An iterative numerical procedure failed (divergence, non-convergence)."""


class GdDivergence(NumericalError):
    """Gradient descent diverged; carries the iteration where it blew up."""

    def __init__(self, iteration, loss_value):
        self.iteration = iteration
        self.loss_value = loss_value
        super().__init__(
            f"gradient descent diverged at iteration {iteration} "
            f"(loss={loss_value:.3e}); try a smaller learning rate"
        )
