from . import functional
from .flops import FlopCounter
from .gradcheck import GradCheckReport, grad_check
from .tensor import ShapeError, Tensor, get_default_dtype, no_grad, set_default_dtype

__all__ = [
    "FlopCounter",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "functional",
    "get_default_dtype",
    "grad_check",
    "no_grad",
    "set_default_dtype",
]
