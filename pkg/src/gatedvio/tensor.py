"""Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy float64 array and doubles as a node of the
computation graph: ops record parents and a backward closure eagerly,
``backward()`` on a scalar root walks the graph once in reverse
topological order and accumulates gradients on every ``requires_grad``
leaf.  The graph is single-use: op nodes are freed by the traversal and
a second backward through them raises.

Broadcasting is restricted to equal shapes or scalar-vs-tensor (a
size-one operand).  Layers reshape explicitly instead of relying on
implicit alignment.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input lies outside an op's documented domain (log <= 0, div by 0, tau <= 0)."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar root, freed graph, ...)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""
        self._freed = False

    # -- basic protocol ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a size-1 tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A graph-free view of the same values."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _needs_grad(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def _add_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other)

    def __radd__(self, other):
        return _binary("add", _wrap(other), self)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __rsub__(self, other):
        return _binary("sub", _wrap(other), self)

    def __mul__(self, other):
        return _binary("mul", self, other)

    def __rmul__(self, other):
        return _binary("mul", _wrap(other), self)

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __rtruediv__(self, other):
        return _binary("div", _wrap(other), self)

    def __neg__(self):
        return unary("neg", self)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- elementwise ------------------------------------------------------

    def tanh(self):
        return unary("tanh", self)

    def sigmoid(self):
        return unary("sigmoid", self)

    def relu(self):
        return unary("relu", self)

    def exp(self):
        return unary("exp", self)

    def log(self):
        return unary("log", self)

    # -- structure --------------------------------------------------------

    def sum(self, axis: int | None = None):
        return reduce("sum", self, axis)

    def mean(self, axis: int | None = None):
        return reduce("mean", self, axis)

    def slice(self, axis: int, start: int, stop: int) -> "Tensor":
        """Contiguous slice [start, stop) along one axis."""
        idx = [np.s_[:]] * self.data.ndim
        idx[axis] = np.s_[start:stop]
        idx = tuple(idx)
        out_data = self.data[idx]

        def backward(g, x=self, index=idx):
            if x._needs_grad():
                full = np.zeros_like(x.data)
                full[index] = g
                x._add_grad(full)

        return record_op(out_data.copy(), (self,), backward, f"slice[{axis}]")

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f"transpose expects a 2-d tensor, got shape {self.shape}")

        def backward(g, x=self):
            if x._needs_grad():
                x._add_grad(g.T)

        return record_op(self.data.T.copy(), (self,), backward, "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape

        def backward(g, x=self, old_shape=old):
            if x._needs_grad():
                x._add_grad(g.reshape(old_shape))

        return record_op(self.data.reshape(shape), (self,), backward, "reshape")

    # -- autodiff ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar root; consumes the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward root must be scalar, got shape {self.shape}")
        if self._freed:
            raise GraphError("backward through a freed graph")

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    if p._freed:
                        raise GraphError("backward through a freed graph")
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node._freed = True


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record_op(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Create the output tensor of an op, recording the graph edge when enabled.

    ``backward`` receives the upstream gradient and is responsible for
    accumulating into each parent that needs one.
    """
    out = Tensor(data)
    if _grad_enabled and any(p._needs_grad() for p in parents):
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


# -- primitive ops ---------------------------------------------------------


def _broadcast_check(a: Tensor, b: Tensor, op: str):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are neither equal nor scalar-vs-tensor")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # inverse of scalar-vs-tensor broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def _binary(kind: str, a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_check(a, b, kind)
    if kind == "add":
        data = a.data + b.data
    elif kind == "sub":
        data = a.data - b.data
    elif kind == "mul":
        data = a.data * b.data
    elif kind == "div":
        if np.any(b.data == 0.0):
            raise DomainError("div: divisor contains zero")
        data = a.data / b.data
    else:
        raise ValueError(f"unknown binary op {kind!r}")

    def backward(g, kind=kind, a=a, b=b):
        if kind == "add":
            ga, gb = g, g
        elif kind == "sub":
            ga, gb = g, -g
        elif kind == "mul":
            ga, gb = g * b.data, g * a.data
        else:  # div
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
        if a._needs_grad():
            a._add_grad(_reduce_to(np.asarray(ga, dtype=np.float64), a.shape))
        if b._needs_grad():
            b._add_grad(_reduce_to(np.asarray(gb, dtype=np.float64), b.shape))

    return record_op(data, (a, b), backward, kind)


def binary(kind: str, a, b) -> Tensor:
    """Elementwise add / sub / mul / div with the restricted broadcasting rule."""
    return _binary(kind, a, b)


_UNARY_FORWARD = {
    "tanh": np.tanh,
    "sigmoid": lambda x: 1.0 / (1.0 + np.exp(-x)),
    "relu": lambda x: np.maximum(x, 0.0),
    "exp": np.exp,
    "neg": np.negative,
}


def unary(kind: str, x) -> Tensor:
    """Elementwise tanh / sigmoid / relu / exp / log / neg.

    The relu derivative at exactly 0 is 0 (conventional subgradient
    choice; finite-difference checks avoid the kink).
    """
    x = _wrap(x)
    if kind == "log":
        bad = x.data <= 0.0
        if np.any(bad):
            idx = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DomainError(f"log: non-positive entry {x.data[idx]!r} at index {idx}")
        data = np.log(x.data)
    else:
        try:
            data = _UNARY_FORWARD[kind](x.data)
        except KeyError:
            raise ValueError(f"unknown unary op {kind!r}") from None

    def backward(g, kind=kind, x=x, y=data):
        if not x._needs_grad():
            return
        if kind == "tanh":
            gx = g * (1.0 - y * y)
        elif kind == "sigmoid":
            gx = g * y * (1.0 - y)
        elif kind == "relu":
            gx = g * (x.data > 0.0)
        elif kind == "exp":
            gx = g * y
        elif kind == "log":
            gx = g / x.data
        else:  # neg
            gx = -g
        x._add_grad(gx)

    return record_op(data, (x,), backward, kind)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g, a=a, b=b):
        if a._needs_grad():
            a._add_grad(g @ b.data.T)
        if b._needs_grad():
            b._add_grad(a.data.T @ g)

    return record_op(data, (a, b), backward, "matmul")


def reduce(kind: str, x, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    if kind == "sum":
        data = np.sum(x.data, axis=axis)
    elif kind == "mean":
        data = np.mean(x.data, axis=axis)
    else:
        raise ValueError(f"unknown reduce op {kind!r}")
    n = x.data.size if axis is None else x.data.shape[axis]

    def backward(g, kind=kind, x=x, axis=axis, n=n):
        if not x._needs_grad():
            return
        if axis is None:
            gx = np.broadcast_to(g, x.data.shape)
        else:
            gx = np.broadcast_to(np.expand_dims(g, axis), x.data.shape)
        if kind == "mean":
            gx = gx / n
        x._add_grad(np.ascontiguousarray(gx))

    return record_op(np.asarray(data, dtype=np.float64), (x,), backward, kind)


def concat(a, b, axis: int) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != b.data.ndim:
        raise ShapeError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    for ax in range(a.data.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} disagree off axis {axis}")
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.shape[axis]

    def backward(g, a=a, b=b, axis=axis, split=split):
        idx_a = [np.s_[:]] * g.ndim
        idx_a[axis] = np.s_[:split]
        idx_b = [np.s_[:]] * g.ndim
        idx_b[axis] = np.s_[split:]
        if a._needs_grad():
            a._add_grad(g[tuple(idx_a)])
        if b._needs_grad():
            b._add_grad(g[tuple(idx_b)])

    return record_op(data, (a, b), backward, "concat")


def _softmax_data(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = _wrap(x)
    y = _softmax_data(x.data, axis)

    def backward(g, x=x, y=y, axis=axis):
        if x._needs_grad():
            dot = np.sum(g * y, axis=axis, keepdims=True)
            x._add_grad(y * (g - dot))

    return record_op(y, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max-shift form)."""
    x = _wrap(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g, x=x, y=y, axis=axis):
        if x._needs_grad():
            gsum = np.sum(g, axis=axis, keepdims=True)
            x._add_grad(g - np.exp(y) * gsum)

    return record_op(y, (x,), backward, "log_softmax")


# -- verification helpers ----------------------------------------------------


def grad_check(f, x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic (any
    noise frozen by the caller).  Error metric per element:
    ``|g_ad - g_fd| / max(1, |g_fd|)``.  NaN in either gradient yields +inf.
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    out.backward()
    g_ad = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = np.ascontiguousarray(x.data, dtype=np.float64).copy()
    work = base.reshape(-1)
    g_fd = np.zeros(base.size)
    with no_grad():
        for i in range(work.size):
            orig = work[i]
            work[i] = orig + eps
            hi = f(Tensor(base)).item()
            work[i] = orig - eps
            lo = f(Tensor(base)).item()
            work[i] = orig
            g_fd[i] = (hi - lo) / (2.0 * eps)
    g_fd = g_fd.reshape(base.shape)

    if np.any(np.isnan(g_ad)) or np.any(np.isnan(g_fd)):
        return float("inf")
    rel = np.abs(g_ad - g_fd) / np.maximum(1.0, np.abs(g_fd))
    return float(np.max(rel)) if rel.size else 0.0


def graph_dump(root: Tensor) -> str:
    """Text edge list of the recorded graph, for inspection."""
    lines = []
    seen = set()
    stack = [root]
    order = {}
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order[id(node)] = len(order)
        stack.extend(node._parents)

    def name(n):
        return f"t{order[id(n)]}:{n._op or 'leaf'}{list(n.shape)}"

    seen = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        for p in node._parents:
            lines.append(f"{name(node)} <- {name(p)}")
            stack.append(p)
    return "\n".join(lines)
