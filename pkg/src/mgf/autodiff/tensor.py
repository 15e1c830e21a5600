"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every backward rule is written in terms of ``Tensor`` operations, so a
gradient computed with ``create_graph=True`` is itself a differentiable
graph.  That is the path the gradient penalty uses: the input-gradient of
the critic becomes an ordinary tensor whose parameter gradients can be
taken with one more ``grad`` call.

Ops whose backward rule is not expressed in differentiable form are marked
``second_order=False`` and refuse to participate in ``create_graph``.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from mgf.errors import NumericOverflowError, SecondOrderError, ShapeError, UsageError

_node_ids = itertools.count()
# per-thread so independent graphs can be built concurrently
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Disable graph recording inside the block."""
    return _grad_mode(False)


class Tensor:
    """A float64 array plus the op record that produced it."""

    __slots__ = ("data", "requires_grad", "op", "inputs", "_backward", "second_order", "id", "name")
    # make ndarray <op> Tensor dispatch to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: Callable[[Tensor], Sequence[Tensor | None]] | None = None
        self.second_order = True
        self.id = next(_node_ids)
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if not self.is_leaf else ""
        return f"Tensor(shape={self.shape}{tag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], second_order: bool = True) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericOverflowError(f"non-finite result in op '{op}'")
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.op = op
        out.inputs = inputs
        out.second_order = second_order
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- shape plumbing --------------------------------------------------------


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, n in enumerate(shape) if n == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    out = _result("sum_to", data.reshape(shape), (x,))
    if out.requires_grad:
        src = x.shape
        out._backward = lambda g: (broadcast_to(g, src),)
    return out


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {x.shape} to {shape}") from None
    out = _result("broadcast_to", data, (x,))
    if out.requires_grad:
        src = x.shape
        out._backward = lambda g: (sum_to(g, src),)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    out = _result("reshape", data, (x,))
    if out.requires_grad:
        src = x.shape
        out._backward = lambda g: (reshape(g, src),)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {x.shape}")
    out = _result("transpose", x.data.T.copy(), (x,))
    if out.requires_grad:
        out._backward = lambda g: (transpose(g),)
    return out


def getitem(x: Tensor, idx) -> Tensor:
    out = _result("getitem", np.array(x.data[idx], dtype=np.float64), (x,))
    if out.requires_grad:
        src = x.shape
        out._backward = lambda g: (_scatter(g, src, idx),)
    return out


def _scatter(g: Tensor, shape: tuple[int, ...], idx) -> Tensor:
    data = np.zeros(shape)
    data[idx] = g.data
    out = _result("scatter", data, (g,))
    if out.requires_grad:
        out._backward = lambda h: (getitem(h, idx),)
    return out


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = _result("add", a.data + b.data, (a, b))
    if out.requires_grad:
        out._backward = lambda g: (sum_to(g, a.shape), sum_to(g, b.shape))
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = _result("sub", a.data - b.data, (a, b))
    if out.requires_grad:
        out._backward = lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _result("neg", -a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (neg(g),)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = _result("mul", a.data * b.data, (a, b))
    if out.requires_grad:
        out._backward = lambda g: (
            sum_to(mul(g, b), a.shape) if a.requires_grad else None,
            sum_to(mul(g, a), b.shape) if b.requires_grad else None,
        )
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    out = _result("div", data, (a, b))
    if out.requires_grad:
        out._backward = lambda g: (
            sum_to(div(g, b), a.shape) if a.requires_grad else None,
            sum_to(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None,
        )
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _result("matmul", a.data @ b.data, (a, b))
    if out.requires_grad:
        out._backward = lambda g: (
            matmul(g, transpose(b)) if a.requires_grad else None,
            matmul(transpose(a), g) if b.requires_grad else None,
        )
    return out


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _result("sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,))
    if out.requires_grad:
        src = a.shape
        kept = np.sum(a.data, axis=axis, keepdims=True).shape

        def backward(g):
            return (broadcast_to(reshape(g, kept), src),)

        out._backward = backward
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def square(a) -> Tensor:
    a = as_tensor(a)
    out = _result("square", a.data * a.data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, mul(a, 2.0)),)
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise NumericOverflowError("non-finite result in op 'sqrt' (negative input)")
    out = _result("sqrt", np.sqrt(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (div(g, mul(out, 2.0)),)
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _result("exp", data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, out),)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    out = _result("log", data, (a,))
    if out.requires_grad:
        out._backward = lambda g: (div(g, a),)
    return out


# -- activations -----------------------------------------------------------


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _result("tanh", np.tanh(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, sub(1.0, square(out))),)
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _result("sigmoid", _sigmoid_np(a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a) -> Tensor:
    """log(1 + exp(a)), stable for large |a|."""
    a = as_tensor(a)
    out = _result("softplus", np.logaddexp(0.0, a.data), (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, sigmoid(a)),)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    out = _result("relu", a.data * mask, (a,))
    if out.requires_grad:
        # mask is a constant: second derivative is zero everywhere, kink included
        out._backward = lambda g: (mul(g, mask),)
    return out


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    out = _result("leaky_relu", a.data * scale, (a,))
    if out.requires_grad:
        out._backward = lambda g: (mul(g, scale),)
    return out


def identity(a) -> Tensor:
    return as_tensor(a)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": identity,
    "tanh": tanh,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
}


# -- reductions used by the losses -----------------------------------------


def row_norm(x) -> Tensor:
    """Euclidean norm of each row of a matrix, shape (n,).

    A zero row gets norm 0 and a zero subgradient instead of a division by
    zero.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"row_norm: expected a matrix, got shape {x.shape}")
    data = np.sqrt(np.sum(x.data * x.data, axis=1))
    out = _result("row_norm", data, (x,))
    if out.requires_grad:
        nonzero = (data > 0).astype(np.float64)
        pad = 1.0 - nonzero

        def backward(g):
            scale = mul(div(g, add(out, pad)), nonzero)
            return (mul(x, reshape(scale, (-1, 1))),)

        out._backward = backward
    return out


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -sum(targets * log_softmax(logits)).

    ``targets`` is either an integer label vector or a row-stochastic matrix.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected (n, classes) logits, got {logits.shape}")
    n, c = logits.shape
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {t.shape}")
        if np.any(t < 0) or np.any(t >= c):
            raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
        onehot = np.zeros((n, c))
        onehot[np.arange(n), t.astype(int)] = 1.0
        t = onehot
    elif t.shape != logits.shape:
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs targets {t.shape}")
    t = t.astype(np.float64)
    logp = log_softmax_np(logits.data)
    out = _result("softmax_cross_entropy", np.asarray(-(t * logp).sum() / n), (logits,), second_order=False)
    if out.requires_grad:
        probs = np.exp(logp)
        out._backward = lambda g: (mul(g, (probs * t.sum(axis=1, keepdims=True) - t) / n),)
    return out


# -- differentiation -------------------------------------------------------


def _topo(output: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and parent.id not in seen:
                stack.append((parent, False))
    return order


def topological_nodes(output: Tensor) -> list[Tensor]:
    """All differentiable nodes feeding ``output``, inputs before consumers."""
    return _topo(output)


def grad(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors not on any path to the output get zero gradients.  With
    ``create_graph`` the returned gradients are differentiable.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise UsageError(f"grad: output must be scalar, got shape {output.shape}")
    zeros = [Tensor(np.zeros(t.shape)) for t in wrt]
    if not output.requires_grad:
        return zeros
    order = _topo(output)
    targets = {t.id for t in wrt}
    grads: dict[int, Tensor] = {output.id: Tensor(np.ones(output.shape))}
    with _grad_mode(create_graph):
        for node in reversed(order):
            g = grads.get(node.id) if node.id in targets else grads.pop(node.id, None)
            if g is None or node.is_leaf:
                continue
            if create_graph and not node.second_order:
                raise SecondOrderError(f"second-order unsupported for op {node.op}")
            for parent, pg in zip(node.inputs, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else add(prev, pg)
    return [grads.get(t.id, z) for t, z in zip(wrt, zeros)]


def input_gradient(output: Tensor, x: Tensor) -> Tensor:
    """Differentiable gradient of scalar ``output`` w.r.t. input ``x``."""
    return grad(output, [x], create_graph=True)[0]
