"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays in the canonical feature-map layout
[batch N, channels C, time T, height H, width W] (lower ranks are fine for
fully-connected data and scalars).  Every differentiable operation records a
TapeNode; ``backward`` on a scalar loss walks the tape once in reverse
topological order and accumulates gradients into the participating leaves.

Only the operations needed by the attention network live here and in
:mod:`fcan.ops`; this is not a general-purpose framework.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor",
    "TapeNode",
    "no_grad",
    "is_grad_enabled",
    "set_nan_checks",
    "add",
    "sub",
    "elementwise_mul",
    "scale",
    "sum_all",
    "reshape",
]

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad():
    """Disable tape recording (inference / evaluation paths)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


_NAN_CHECKS = False


def set_nan_checks(enabled: bool) -> None:
    """When on, every op asserts its output is finite (slow; for tests)."""
    global _NAN_CHECKS
    _NAN_CHECKS = bool(enabled)


class TapeNode:
    """One recorded operation: parents plus the rule mapping d(out) to d(parents).

    ``grad_fn(grad_out)`` returns one gradient array (or None) per parent.
    Saved state needed by the rule (pooling argmax indices, dropout masks,
    normalization statistics, gathered convolution patches) is captured in the
    ``grad_fn`` closure.
    """

    __slots__ = ("op", "parents", "grad_fn")

    def __init__(self, op: str, parents, grad_fn):
        self.op = op
        self.parents = tuple(parents)
        self.grad_fn = grad_fn

    def __repr__(self):  # pragma: no cover - debug aid
        return f"TapeNode({self.op}, {len(self.parents)} parents)"


class Tensor:
    """Dense n-dimensional real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self) -> float:
        return float(self.data)

    # -- graph management ----------------------------------------------
    def detach(self) -> "Tensor":
        """Leaf view of the same values; gradients stop here."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    # -- convenience operators ------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def sum(self):
        return sum_all(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data: np.ndarray, parents, grad_fn) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are live."""
    if _NAN_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    needs = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data)
    out.requires_grad = needs
    if needs:
        out.node = TapeNode(op, parents, grad_fn)
    return out


def _toposort(root: Tensor):
    """Tensors reachable from root that carry nodes, in topological order."""
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        t, processed = stack.pop()
        if processed:
            order.append(t)
            continue
        if id(t) in visited or t.node is None:
            continue
        visited.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in visited:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable leaf with dLoss/dLeaf.

    Rejects non-scalar roots.  Each tape node is visited exactly once, in
    reverse topological order; gradients of shared parents accumulate.
    """
    if loss.data.shape != ():
        raise ValueError(
            f"backward requires a scalar; got shape {loss.data.shape}"
        )
    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    if loss.requires_grad and loss.node is None:
        # loss is itself a leaf
        loss.grad = (loss.grad if loss.grad is not None else 0) + grads[id(loss)]
        return
    for t in reversed(_toposort(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        parent_grads = t.node.grad_fn(g)
        for p, pg in zip(t.node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.node is None:
                p.grad = pg if p.grad is None else p.grad + pg
            else:
                acc = grads.get(id(p))
                grads[id(p)] = pg if acc is None else acc + pg


# -- basic differentiable ops -----------------------------------------------

def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(
            f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}"
        )


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; shapes must match exactly (no broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape("elementwise_mul", a, b)
    ad, bd = a.data, b.data
    return make_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    c = float(c)
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, dt = x.data.shape, x.data.dtype
    return make_op(
        "sum", np.asarray(x.data.sum(), dtype=dt), (x,),
        lambda g: (np.broadcast_to(np.asarray(g, dtype=dt), shape).copy(),),
    )


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    return make_op(
        "reshape", x.data.reshape(shape), (x,),
        lambda g: (g.reshape(old),),
    )
