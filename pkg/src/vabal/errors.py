"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for a primitive."""

    def __init__(self, primitive, *shapes):
        self.primitive = primitive
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{primitive}: incompatible shapes {joined}")


class NumericOverflowError(FloatingPointError):
    """A primitive produced NaN or Inf."""

    def __init__(self, primitive):
        self.primitive = primitive
        super().__init__(f"{primitive}: non-finite value in output")


class ParseError(ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DegeneratePoolError(RuntimeError):
    """A pool is too small or too homogeneous for the requested step."""
