"""Reverse-mode automatic differentiation with differentiable backward passes."""
from . import ops
from .backprop import GradMap, backward, grad
from .core import (
    AutodiffError,
    Graph,
    GraphMismatchError,
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
)
from .gradcheck import GradCheckReport, check_gradients, relative_error
from .jacobian import (
    batch_frob_sq,
    batch_frob_sq_estimate,
    frob_sq,
    frob_sq_estimate,
    jacobian_exact,
    jacobian_rows,
)

__all__ = [
    "AutodiffError",
    "GradCheckReport",
    "GradMap",
    "Graph",
    "GraphMismatchError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "batch_frob_sq",
    "batch_frob_sq_estimate",
    "check_gradients",
    "frob_sq",
    "frob_sq_estimate",
    "grad",
    "jacobian_exact",
    "jacobian_rows",
    "ops",
    "relative_error",
]
