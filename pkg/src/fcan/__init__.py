"""Two-stream 3D CNN with flow-guided cross-link attention.

A temporal (optical-flow) stream produces a single-channel attention map that
multiplicatively gates the matching spatial (RGB) stream stage.  The package
also provides homography-based camera-motion compensation of flow fields, a
synthetic video generator with exact ground truth, and the training and
evaluation machinery to measure the attention mechanism's effect.
"""

from .autograd import Tensor, backward, no_grad, set_nan_checks
from .gradcheck import grad_check, standard_op_checks

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "set_nan_checks",
    "grad_check",
    "standard_op_checks",
]
