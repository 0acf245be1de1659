"""Small dense-tensor engine with reverse-mode differentiation.

Every tensor wraps a float64 numpy array. Operations record their parents and
a vector-Jacobian product; :func:`backward` walks the recorded nodes in reverse
creation order, which is always a valid topological order because a node can
only be created after its parents.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_node_ids = itertools.count()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.node_id = next(_node_ids)
        self.name = name
        _check_finite(self.data, "leaf")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar; scalars are allowed on either side, arrays must match shape
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return select(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op!r}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Record the result of an operation.

    ``vjp`` maps the upstream gradient (same shape as ``data``) to one gradient
    per parent, or ``None`` for a parent that needs none.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out.parents = tuple(parents) if out.requires_grad else ()
    out.vjp = vjp if out.requires_grad else None
    out.op = op
    out.node_id = next(_node_ids)
    out.name = None
    _check_finite(out.data, op)
    return out


# ---------------------------------------------------------------- elementwise


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a = as_tensor(a)
        return make_node(a.data + float(b), (a,), lambda g: (g,), "add_scalar")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -float(b))
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return add(mul(b, -1.0), float(a))
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        a, c = as_tensor(a), float(b)
        return make_node(a.data * c, (a,), lambda g: (g * c,), "mul_scalar")
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return make_node(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at exactly 0 is taken as 0."""
    y = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(y > 0, 0.5 / np.where(y > 0, y, 1.0), 0.0)
        return (g * d,)

    return make_node(y, (x,), vjp, "sqrt")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_node(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)  # non-finite results are rejected by make_node
    return make_node(y, (x,), lambda g: (g / xd,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make_node(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_node(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0, restoring: bool = False) -> Tensor:
    """Clip to [lo, hi]; gradient passes where lo <= x <= hi, zero outside.

    With ``restoring`` the gradient also passes outside the interval when a
    descent step (-g) would move x back toward it, so clipped values cannot
    get stuck.
    """
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    if not restoring:
        return make_node(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")

    def vjp(g):
        keep = inside | ((xd < lo) & (g < 0)) | ((xd > hi) & (g > 0))
        return (g * keep,)

    return make_node(np.clip(xd, lo, hi), (x,), vjp, "clamp_restoring")


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "linear": lambda x: x,
}


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.sum(x.data), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return make_node(np.sum(x.data) / n, (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis of an N x c tensor, giving N x 1."""
    c = x.shape[1]
    return make_node(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.repeat(g, c, axis=1),), "sum_rows")


def max_pool_points(x: Tensor) -> Tensor:
    """Column-wise max over the rows of an N x c tensor.

    The gradient goes to the first row attaining the max in each column.
    """
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"max_pool_points expects a non-empty N x c tensor, got {x.shape}")
    arg = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        out[arg, cols] = g
        return (out,)

    return make_node(x.data[arg, cols], (x,), vjp, "max_pool")


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_node(y, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(x: Tensor) -> Tensor:
    """Softmax over all entries of a 1-D tensor."""
    z = np.exp(x.data - x.data.max())
    y = z / z.sum()
    return make_node(y, (x,), lambda g: (y * (g - np.dot(g, y)),), "softmax")


# ---------------------------------------------------------------- linear algebra and shape


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return make_node(ad @ bd, (a, b), vjp, "matmul")


def linear(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map ``x @ w + bias`` for x of shape N x a."""
    if x.data.ndim != 2 or w.data.ndim != 2 or bias.data.ndim != 1:
        raise ValueError("linear expects x: N x a, w: a x b, bias: b")
    if x.shape[1] != w.shape[0] or w.shape[1] != bias.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} @ {w.shape} + {bias.shape}")
    xd, wd = x.data, w.data
    return make_node(
        xd @ wd + bias.data,
        (x, w, bias),
        lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)),
        "linear",
    )


def concat_features(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation of N x c1 and N x c2."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_features: row mismatch {a.shape} vs {b.shape}")
    c1 = a.shape[1]
    return make_node(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :c1], g[:, c1:]),
        "concat",
    )


def repeat_rows(x: Tensor, n: int) -> Tensor:
    """Replicate a length-c vector into an n x c tensor."""
    if x.data.ndim != 1:
        raise ValueError("repeat_rows expects a vector")
    return make_node(np.tile(x.data, (n, 1)), (x,), lambda g: (g.sum(axis=0),), "repeat_rows")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def select(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient."""
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_node(x.data[index], (x,), vjp, "select")


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Sum of x scaled elementwise by a constant array of the same shape."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ValueError(f"weighted_sum: weight shape {w.shape} vs {x.shape}")
    return make_node(np.sum(w * x.data), (x,), lambda g: (float(g) * w,), "weighted_sum")


# ---------------------------------------------------------------- graph walk


@dataclass
class Graph:
    """Recorded primitive ops reachable from a root, in creation order."""

    nodes: list[Tensor] = field(default_factory=list)

    @property
    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def trace(root: Tensor) -> Graph:
    """Nodes reachable from ``root`` in topological order (parents first).

    Identity is by object, so tensors restored from a pickle or built in
    another process never alias nodes of the current graph.
    """
    order: list[Tensor] = []
    done: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in done:
            continue
        if expanded:
            done.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        stack.extend((p, False) for p in reversed(node.parents) if id(p) not in done)
    return Graph(order)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every reachable leaf with requires_grad.

    Returns a map from leaf tensor to its gradient; the same arrays are also
    stored on ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    graph = trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:
            if node.requires_grad:
                node.grad = g
                leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar from the current values of ``params``; each
    coordinate is perturbed in place and restored afterwards.
    """
    params = list(params)
    for p in params:
        p.grad = None
    analytic = backward(f())
    worst = 0.0
    for p in params:
        a = analytic.get(p, np.zeros(p.shape)).reshape(-1)
        flat = p.data.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            fp = f().item()
            flat[k] = orig - eps
            fm = f().item()
            flat[k] = orig
            central = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(a[k] - central) / (abs(central) + 1e-8))
    return worst
