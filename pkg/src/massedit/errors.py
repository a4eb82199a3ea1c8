"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class SingularMatrixError(ArithmeticError):
    """A symmetric factorization met a non-positive pivot.

    ``pivot`` is the zero-based index of the failing diagonal entry and
    ``layer`` is filled in by callers that know which editable layer the
    system belongs to.
    """

    def __init__(self, pivot, value=None, layer=None):
        self.pivot = int(pivot)
        self.value = value
        self.layer = layer
        msg = f"matrix is not positive definite (pivot {self.pivot}"
        if value is not None:
            msg += f", value {value:.3e}"
        msg += ")"
        if layer is not None:
            msg += f" in layer {layer}"
        super().__init__(msg)


class ParseError(ValueError):
    """A dataset or config record could not be parsed."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")
