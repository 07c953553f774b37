"""Active learning with a class-regularized VAE posterior-uncertainty score."""

from .errors import ContractError, DegeneratePoolError, NumericOverflowError, ParseError, ShapeError

__version__ = "0.1.0"

__all__ = ["ContractError", "DegeneratePoolError", "NumericOverflowError", "ParseError", "ShapeError"]
