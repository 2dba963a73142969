from . import functional
from .functional import ConfigError
from .gradcheck import GradCheckError, GradCheckReport, grad_check
from .tensor import PaddingMask, Parameter, Tensor, no_grad

__all__ = [
    "ConfigError",
    "GradCheckError",
    "GradCheckReport",
    "PaddingMask",
    "Parameter",
    "Tensor",
    "functional",
    "grad_check",
    "no_grad",
]
