"""Reverse-mode automatic differentiation over float64 numpy buffers.

Every vector-Jacobian product is itself written in terms of `Tensor`
operations, so calling :func:`grad` with ``create_graph=True`` records the
backward pass and the result can be differentiated again (double backward).

Example
-------
>>> x = Tensor([3.0], requires_grad=True)
>>> y = (x * x).sum()
>>> (gx,) = grad(y, [x], create_graph=True)
>>> gx.data
array([6.])
>>> (gxx,) = grad(gx.sum(), [x])
>>> gxx.data
array([2.])
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiffGraph",
    "Node",
    "grad",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "swapaxes",
    "reshape",
    "sum",
    "mean",
    "broadcast_to",
    "sum_to",
    "tanh",
    "sigmoid",
    "softplus",
    "relu",
    "exp",
    "log",
    "sqrt",
    "square",
    "norm",
    "softmax",
    "log_softmax",
    "shift",
    "concat",
    "SMOOTH_OPS",
]

_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _tapes() -> list:
    tapes = getattr(_local, "tapes", None)
    if tapes is None:
        tapes = _local.tapes = []
    return tapes


def is_grad_enabled() -> bool:
    return _grad_enabled()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def _enable_grad(flag: bool):
    prev = _grad_enabled()
    _local.grad_enabled = flag
    try:
        yield
    finally:
        _local.grad_enabled = prev


# ---------------------------------------------------------------------------
# op registry
# ---------------------------------------------------------------------------

_FORWARD: dict[str, Callable[..., np.ndarray]] = {}
_VJP: dict[str, Callable[..., tuple]] = {}

# ops that are at least C^2 in every input; relu is deliberately absent
SMOOTH_OPS = frozenset(
    {
        "add", "sub", "mul", "div", "neg", "matmul", "swapaxes", "reshape",
        "sum", "broadcast_to", "sum_to", "tanh", "sigmoid", "softplus", "exp",
        "log", "sqrt", "square", "softmax", "log_softmax", "shift", "getitem",
        "scatter", "concat",
    }
)


def _register(name: str, forward: Callable, vjp: Callable) -> None:
    _FORWARD[name] = forward
    _VJP[name] = vjp


class Tensor:
    """An n-d float64 array that optionally records how it was computed."""

    __slots__ = ("data", "requires_grad", "op", "parents", "attrs", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data: Any, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.attrs: dict = {}

    # -- basic properties ---------------------------------------------------
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
    def T(self) -> "Tensor":
        return swapaxes(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------------
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

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        if exponent == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    def __getitem__(self, index):
        return _apply("getitem", self, index=index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, *inputs, **attrs) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in inputs)
    data = _FORWARD[op](*(t.data for t in tensors), **attrs)
    out = Tensor(data)
    if _grad_enabled() and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        out.op = op
        out.parents = tensors
        out.attrs = attrs
    for tape in _tapes():
        tape._record(out, op, tensors, attrs)
    return out


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------


def _sum_to_array(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    if lead > 0:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def _shift_array(x: np.ndarray, offset: int, axis: int) -> np.ndarray:
    # out[i] = x[i - offset] along `axis`, zero filled
    out = np.zeros_like(x)
    n = x.shape[axis]
    if abs(offset) >= n:
        return out
    src = [slice(None)] * x.ndim
    dst = [slice(None)] * x.ndim
    if offset >= 0:
        src[axis] = slice(0, n - offset)
        dst[axis] = slice(offset, n)
    else:
        src[axis] = slice(-offset, n)
        dst[axis] = slice(0, n + offset)
    out[tuple(dst)] = x[tuple(src)]
    return out


def _scatter_array(g: np.ndarray, index, shape) -> np.ndarray:
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return out


def _keepdims_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


# ---------------------------------------------------------------------------
# primitive ops and their VJPs (VJPs use Tensor ops => differentiable)
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    return _apply("add", a, b)


def sub(a, b) -> Tensor:
    return _apply("sub", a, b)


def mul(a, b) -> Tensor:
    return _apply("mul", a, b)


def div(a, b) -> Tensor:
    return _apply("div", a, b)


def neg(a) -> Tensor:
    return _apply("neg", a)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    return _apply("matmul", a, b)


def swapaxes(a) -> Tensor:
    """Swap the last two axes."""
    return _apply("swapaxes", a)


def reshape(a, shape) -> Tensor:
    return _apply("reshape", a, shape=tuple(shape))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    return _apply("sum", a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    return _apply("broadcast_to", a, shape=tuple(shape))


def sum_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    if a.shape == tuple(shape):
        return a
    return _apply("sum_to", a, shape=tuple(shape))


def tanh(a) -> Tensor:
    return _apply("tanh", a)


def sigmoid(a) -> Tensor:
    return _apply("sigmoid", a)


def softplus(a) -> Tensor:
    return _apply("softplus", a)


def relu(a) -> Tensor:
    return _apply("relu", a)


def exp(a) -> Tensor:
    return _apply("exp", a)


def log(a) -> Tensor:
    return _apply("log", a)


def sqrt(a) -> Tensor:
    return _apply("sqrt", a)


def square(a) -> Tensor:
    return _apply("square", a)


def norm(a, axis=-1, eps: float = 0.0) -> Tensor:
    """Euclidean norm along `axis`; `eps` keeps the derivative finite at 0."""
    s = sum(square(a), axis=axis)
    return sqrt(s + eps) if eps else sqrt(s)


def softmax(a, axis=-1) -> Tensor:
    return _apply("softmax", a, axis=axis)


def log_softmax(a, axis=-1) -> Tensor:
    return _apply("log_softmax", a, axis=axis)


def shift(a, offset: int, axis: int) -> Tensor:
    """Zero-filled translation: ``out[i] = a[i - offset]`` along `axis`."""
    return _apply("shift", a, offset=int(offset), axis=int(axis))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return _apply("concat", *tensors, axis=axis)


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_array(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _log_softmax_array(x, axis):
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _concat_vjp(g, out, *parents, axis):
    grads = []
    start = 0
    ax = axis % out.ndim
    for p in parents:
        stop = start + p.shape[ax]
        idx = [slice(None)] * out.ndim
        idx[ax] = slice(start, stop)
        grads.append(g[tuple(idx)])
        start = stop
    return tuple(grads)


_register(
    "add",
    lambda a, b: a + b,
    lambda g, out, a, b: (sum_to(g, a.shape), sum_to(g, b.shape)),
)
_register(
    "sub",
    lambda a, b: a - b,
    lambda g, out, a, b: (sum_to(g, a.shape), neg(sum_to(g, b.shape))),
)
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)),
)
_register(
    "div",
    lambda a, b: a / b,
    lambda g, out, a, b: (sum_to(g / b, a.shape), sum_to(neg(g * out / b), b.shape)),
)
_register("neg", lambda a: -a, lambda g, out, a: (neg(g),))
_register(
    "matmul",
    lambda a, b: a @ b,
    lambda g, out, a, b: (
        sum_to(matmul(g, swapaxes(b)), a.shape),
        sum_to(matmul(swapaxes(a), g), b.shape),
    ),
)
_register(
    "swapaxes",
    lambda a: np.swapaxes(a, -1, -2),
    lambda g, out, a: (swapaxes(g),),
)
_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda g, out, a, shape: (reshape(g, a.shape),),
)
_register(
    "sum",
    lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims),
    lambda g, out, a, axis, keepdims: (
        broadcast_to(reshape(g, _keepdims_shape(a.shape, axis)), a.shape),
    ),
)
_register(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda g, out, a, shape: (sum_to(g, a.shape),),
)
_register(
    "sum_to",
    lambda a, shape: _sum_to_array(a, shape),
    lambda g, out, a, shape: (broadcast_to(g, a.shape),),
)
_register("tanh", np.tanh, lambda g, out, a: (g * (1.0 - square(out)),))
_register("sigmoid", _stable_sigmoid, lambda g, out, a: (g * out * (1.0 - out),))
_register("softplus", lambda a: np.logaddexp(0.0, a), lambda g, out, a: (g * sigmoid(a),))
_register(
    "relu",
    lambda a: np.maximum(a, 0.0),
    lambda g, out, a: (g * Tensor((a.data > 0).astype(np.float64)),),
)
_register("exp", np.exp, lambda g, out, a: (g * out,))
_register("log", np.log, lambda g, out, a: (g / a,))
_register("sqrt", np.sqrt, lambda g, out, a: (g / (2.0 * out),))
_register("square", np.square, lambda g, out, a: (2.0 * g * a,))
_register(
    "softmax",
    _softmax_array,
    lambda g, out, a, axis: (out * (g - sum(g * out, axis=axis, keepdims=True)),),
)
_register(
    "log_softmax",
    _log_softmax_array,
    lambda g, out, a, axis: (g - exp(out) * sum(g, axis=axis, keepdims=True),),
)
_register(
    "shift",
    _shift_array,
    lambda g, out, a, offset, axis: (shift(g, -offset, axis),),
)
_register(
    "getitem",
    lambda a, index: np.array(a[index], dtype=np.float64),
    lambda g, out, a, index: (_apply("scatter", g, index=index, shape=a.shape),),
)
_register(
    "scatter",
    _scatter_array,
    lambda g, out, a, index, shape: (_apply("getitem", g, index=index),),
)
_register(
    "concat",
    lambda *arrays, axis: np.concatenate(arrays, axis=axis),
    _concat_vjp,
)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    grad_output: Tensor | np.ndarray | None = None,
    create_graph: bool = False,
    allow_unused: bool = True,
) -> list[Tensor]:
    """Gradients of `output` with respect to each tensor in `inputs`.

    With ``create_graph=True`` the returned gradients are themselves part of
    the graph and may be differentiated again.  Unused inputs get zeros
    unless ``allow_unused`` is False, in which case a ValueError is raised.
    """
    if not output.requires_grad:
        if not allow_unused:
            raise ValueError("output does not depend on any input")
        return [Tensor(np.zeros_like(t.data)) for t in inputs]
    if grad_output is None:
        if output.size != 1:
            raise ValueError("grad_output is required for non-scalar outputs")
        grad_output = Tensor(np.ones_like(output.data))
    g0 = _as_tensor(grad_output)

    with _enable_grad(create_graph and _grad_enabled()):
        grads: dict[int, Tensor] = {id(output): g0}
        for node in reversed(_topo_order(output)):
            g = grads.get(id(node))
            if g is None or node.op is None:
                continue
            parent_grads = _VJP[node.op](g, node, *node.parents, **node.attrs)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg

    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise ValueError("an input is not reachable from the output")
            g = Tensor(np.zeros_like(t.data))
        elif g.shape != t.shape:
            g = sum_to(g, t.shape)
        result.append(g)
    return result


# ---------------------------------------------------------------------------
# tapes
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict
    value: np.ndarray


@dataclass
class DiffGraph:
    """Sequential record of every op executed while the graph is active.

    Nodes are stored in execution order, so parents always precede
    children.  ``forward`` replays the tape on new input buffers.

    >>> g = DiffGraph()
    >>> with g:
    ...     x = g.input([3.0])
    ...     y = x * x
    >>> g.forward([[4.0]])
    array([16.])
    """

    nodes: list[Node] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    _index: dict[int, int] = field(default_factory=dict, repr=False)
    _keep: list[Tensor] = field(default_factory=list, repr=False)

    def __enter__(self) -> "DiffGraph":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().remove(self)

    def input(self, value, requires_grad: bool = True) -> Tensor:
        t = Tensor(value, requires_grad=requires_grad)
        self._index[id(t)] = len(self.nodes)
        self.inputs.append(len(self.nodes))
        self.nodes.append(Node("input", (), {}, t.data))
        self._keep.append(t)
        return t

    def index_of(self, t: Tensor) -> int:
        return self._index[id(t)]

    def _leaf(self, t: Tensor) -> int:
        idx = self._index.get(id(t))
        if idx is None:
            idx = len(self.nodes)
            self._index[id(t)] = idx
            self.nodes.append(Node("const", (), {}, t.data))
            self._keep.append(t)
        return idx

    def _record(self, out: Tensor, op: str, parents: tuple[Tensor, ...], attrs: dict) -> None:
        pidx = tuple(self._leaf(p) for p in parents)
        self._index[id(out)] = len(self.nodes)
        self.nodes.append(Node(op, pidx, attrs, out.data))
        self._keep.append(out)

    def forward(self, inputs: Sequence, output: Tensor | int | None = None) -> np.ndarray:
        """Re-evaluate the tape with new values for the declared inputs."""
        if len(inputs) != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} inputs, got {len(inputs)}")
        values: list[np.ndarray | None] = [None] * len(self.nodes)
        feed = iter(inputs)
        for i, node in enumerate(self.nodes):
            if node.op == "input":
                v = np.asarray(next(feed), dtype=np.float64)
                if v.shape != node.value.shape:
                    raise ValueError(
                        f"input node {i}: shape {v.shape} does not match recorded {node.value.shape}"
                    )
                if not np.all(np.isfinite(v)):
                    raise ValueError(f"input node {i}: non-finite values")
                values[i] = v
            elif node.op == "const":
                values[i] = node.value
            else:
                values[i] = _FORWARD[node.op](*(values[p] for p in node.parents), **node.attrs)
        if output is None:
            return values[-1]
        idx = output if isinstance(output, int) else self.index_of(output)
        return values[idx]

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def is_smooth(self) -> bool:
        return all(n.op in SMOOTH_OPS or n.op in ("input", "const") for n in self.nodes)
