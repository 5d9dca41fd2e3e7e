"""Dense arrays with reverse-mode differentiation, layers and checkpoints."""

from cadseq.numerics.tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = ["NonFiniteError", "ShapeError", "Tensor", "get_default_dtype", "no_grad", "precision", "set_default_dtype"]
