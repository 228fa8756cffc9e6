"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything differentiable in this package runs on the tape built here:
forward calls record parent links and backward closures on `Tensor`
nodes, and `backward()` on a scalar loss sweeps the tape in reverse
topological order, accumulating gradients into every reachable node.

Import the op module as `from slotground.ndtensor import tensor as ops`
style is ambiguous; prefer `from slotground.ndtensor.tensor import ...`
or the re-exports below.
"""

from .tensor import Tensor, backward, zero_grads
from .nn import layernorm, gru_cell, multi_head_attention, linear, mlp
from .rng import Rng
from .gradcheck import numeric_gradient, check_gradients, relative_error

__all__ = [
    "Tensor",
    "backward",
    "zero_grads",
    "layernorm",
    "gru_cell",
    "multi_head_attention",
    "linear",
    "mlp",
    "Rng",
    "numeric_gradient",
    "check_gradients",
    "relative_error",
]
