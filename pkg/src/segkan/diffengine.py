"""Dense float64 arrays with a dynamic reverse-mode graph.

Every operation either returns a constant ``Array`` (no input requires a
gradient, or recording is disabled) or records a ``Node`` holding the
parents and a backward rule. ``backward`` walks the recorded graph once,
accumulates into leaf ``.grad`` buffers and frees the graph.

Broadcasting is deliberately limited to rank-0 operands; anything else must
go through the explicit ``expand`` op.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


class Node:
    __slots__ = ("op", "parents", "rule", "consumed")

    def __init__(self, op: str, parents: tuple, rule: Callable):
        self.op = op
        self.parents = parents
        self.rule = rule
        self.consumed = False


class Array:
    """N-d float64 array, optionally attached to a recorded graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "Array")
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._node = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Array":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Array":
        return Array._wrap(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Array(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
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
        return unary(self, "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def backward(self) -> int:
        return backward(self)


def as_array(x) -> Array:
    return x if isinstance(x, Array) else Array(x)


def record(op: str, data: np.ndarray, parents: Sequence[Array], rule: Callable) -> Array:
    """Wrap ``data`` as the output of ``op``.

    ``rule(g)`` receives the upstream gradient and returns one gradient (or
    ``None``) per parent, in order.
    """
    _check_finite(data, op)
    out = Array._wrap(np.asarray(data, dtype=np.float64))
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, tuple(parents), rule)
    return out


def backward(loss: Array) -> int:
    """Backpropagate from a rank-0 ``loss``; returns the number of rules run.

    Leaf gradients accumulate across calls until ``zero_grad``. The graph is
    released afterwards, so a second call on the same loss raises.
    """
    if loss.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad += 1.0
            return 0
        raise GraphError("loss is not connected to a recorded graph")
    if loss._node.consumed:
        raise GraphError("graph already consumed by a previous backward call")

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        arr, done = stack.pop()
        if done:
            order.append(arr)
            continue
        if id(arr) in visited:
            continue
        visited.add(id(arr))
        stack.append((arr, True))
        for p in arr._node.parents:
            if p._node is not None and id(p) not in visited:
                stack.append((p, False))

    grads = {id(loss): np.ones(())}
    count = 0
    for arr in reversed(order):
        node = arr._node
        g = grads.pop(id(arr), None)
        if g is None:
            g = np.zeros_like(arr.data)
        pgrads = node.rule(g)
        count += 1
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._node is None:
                p.grad += pg
            elif id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    for arr in order:
        arr._node.consumed = True
        arr._node.parents = ()
        arr._node.rule = None
    return count


# ---------------------------------------------------------------- elementwise

def _binary_shapes(a: Array, b: Array, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes(a, b, "add")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record("add", a.data + b.data, (a, b), rule)


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes(a, b, "sub")

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record("sub", a.data - b.data, (a, b), rule)


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes(a, b, "mul")

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record("mul", a.data * b.data, (a, b), rule)


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _binary_shapes(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def rule(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return record("div", out, (a, b), rule)


def elementwise(a, b, kind: str) -> Array:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


# ---------------------------------------------------------------- unary

def _sigmoid(x):
    # tanh form avoids exp overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# kind -> (forward, derivative(x, y))
UNARY = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "silu": (lambda x: x * _sigmoid(x),
             lambda x, y: _sigmoid(x) * (1.0 + x * (1.0 - _sigmoid(x)))),
    "sin": (np.sin, lambda x, y: np.cos(x)),
    "cos": (np.cos, lambda x, y: -np.sin(x)),
    "neg": (np.negative, lambda x, y: -np.ones_like(x)),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
    "softplus": (lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid(x)),
}


def unary(x: Array, kind: str) -> Array:
    if kind not in UNARY:
        raise ValueError(f"unknown unary kind {kind!r}")
    x = as_array(x)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        y = UNARY[kind][0](x.data)

    def rule(g):
        return (g * UNARY[kind][1](x.data, y),)

    return record(kind, y, (x,), rule)


def sigmoid(x):
    return unary(x, "sigmoid")


def tanh(x):
    return unary(x, "tanh")


def silu(x):
    return unary(x, "silu")


def sin(x):
    return unary(x, "sin")


def cos(x):
    return unary(x, "cos")


def exp(x):
    return unary(x, "exp")


def log(x):
    return unary(x, "log")


def softplus(x):
    return unary(x, "softplus")


# ---------------------------------------------------------------- reductions

def _norm_axes(axes, ndim: int) -> tuple:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def reduce(x: Array, kind: str, axes=None) -> Array:
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduction {kind!r}")
    x = as_array(x)
    axes = _norm_axes(axes, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.sum(axis=axes)
    if kind == "mean":
        out = out / count
    kept = tuple(1 if i in axes else n for i, n in enumerate(x.shape))

    def rule(g):
        g = np.broadcast_to(g.reshape(kept), x.shape)
        if kind == "mean":
            g = g / count
        return (np.array(g),)

    return record(kind, out, (x,), rule)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Array, b: Array) -> Array:
    a, b = as_array(a), as_array(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return record("matmul", a.data @ b.data, (a, b), rule)


def _triple(v, name: str) -> tuple:
    if isinstance(v, int):
        v = (v, v, v)
    v = tuple(int(i) for i in v)
    if len(v) != 3:
        raise ValueError(f"{name} must have three entries")
    return v


def conv3d(x: Array, kernel: Array, stride=1, pad=0, bias: Array | None = None) -> Array:
    """Zero-padded cross-correlation.

    ``x`` is ``[C_in, D, H, W]`` or batched ``[N, C_in, D, H, W]``;
    ``kernel`` is ``[C_out, C_in, kd, kh, kw]``; ``bias`` is ``[C_out]``.
    """
    x, kernel = as_array(x), as_array(kernel)
    stride = _triple(stride, "stride")
    pad = _triple(pad, "pad")
    if min(stride) < 1 or min(pad) < 0:
        raise ValueError("strides must be >= 1 and pads >= 0")
    batched = x.ndim == 5
    if x.ndim not in (4, 5) or kernel.ndim != 5:
        raise ShapeError(f"conv3d shapes {x.shape} / {kernel.shape} have wrong rank")
    xd = x.data if batched else x.data[None]
    n, cin = xd.shape[:2]
    cout, kin, kd, kh, kw = kernel.shape
    if kin != cin:
        raise ShapeError(f"conv3d channel mismatch: input {cin}, kernel {kin}")
    ksize = (kd, kh, kw)
    outs = []
    for i in range(3):
        ext = (xd.shape[2 + i] + 2 * pad[i] - ksize[i]) // stride[i] + 1
        if xd.shape[2 + i] + 2 * pad[i] < ksize[i] or ext < 1:
            raise ShapeError("conv3d output extent would be < 1")
        outs.append(ext)
    do, ho, wo = outs
    xp = np.pad(xd, ((0, 0), (0, 0)) + tuple((p, p) for p in pad)) if any(pad) else xd
    win = sliding_window_view(xp, ksize, axis=(2, 3, 4))
    win = win[:, :, ::stride[0], ::stride[1], ::stride[2]][:, :, :do, :ho, :wo]
    y = np.tensordot(win, kernel.data, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    y = np.moveaxis(y, 4, 1)
    if bias is not None:
        bias = as_array(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv3d bias must be ({cout},), got {bias.shape}")
        y = y + bias.data[None, :, None, None, None]
    out = y if batched else y[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def rule(g):
        gb = g if batched else g[None]
        gw = np.tensordot(gb, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        gxp = np.zeros_like(xp)
        for i, j, k in np.ndindex(kd, kh, kw):
            contrib = np.tensordot(gb, kernel.data[:, :, i, j, k], axes=([1], [0]))
            gxp[:, :,
                i:i + stride[0] * do:stride[0],
                j:j + stride[1] * ho:stride[1],
                k:k + stride[2] * wo:stride[2]] += np.moveaxis(contrib, 4, 1)
        gx = gxp[:, :,
                 pad[0]:pad[0] + xd.shape[2],
                 pad[1]:pad[1] + xd.shape[3],
                 pad[2]:pad[2] + xd.shape[4]]
        gx = gx if batched else gx[0]
        res = [np.ascontiguousarray(gx), gw]
        if bias is not None:
            res.append(gb.sum(axis=(0, 2, 3, 4)))
        return res

    return record("conv3d", out, parents, rule)


# ---------------------------------------------------------------- structural

def reshape(x: Array, shape) -> Array:
    x = as_array(x)
    out = x.data.reshape(shape)

    def rule(g):
        return (g.reshape(x.shape),)

    return record("reshape", out, (x,), rule)


def transpose(x: Array, axes=None) -> Array:
    x = as_array(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def rule(g):
        return (np.transpose(g, inv),)

    return record("transpose", out, (x,), rule)


def getitem(x: Array, index) -> Array:
    x = as_array(x)
    out = x.data[index]

    def rule(g):
        gx = np.zeros_like(x.data)
        if _advanced(index):
            np.add.at(gx, index, g)
        else:
            gx[index] += g
        return (gx,)

    return record("getitem", np.array(out), (x,), rule)


def _advanced(index) -> bool:
    idx = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in idx)


def pad(x: Array, widths: Sequence[tuple]) -> Array:
    """Zero padding; ``widths`` is one (before, after) pair per axis."""
    x = as_array(x)
    widths = tuple((int(a), int(b)) for a, b in widths)
    out = np.pad(x.data, widths)
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))

    def rule(g):
        return (g[crop],)

    return record("pad", out, (x,), rule)


def concat(xs: Iterable[Array], axis: int = 0) -> Array:
    xs = [as_array(x) for x in xs]
    out = np.concatenate([x.data for x in xs], axis=axis)
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, xs, rule)


def stack(xs: Iterable[Array], axis: int = 0) -> Array:
    xs = [as_array(x) for x in xs]
    out = np.stack([x.data for x in xs], axis=axis)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return record("stack", out, xs, rule)


def expand(x: Array, shape) -> Array:
    """Explicit numpy-style broadcast of ``x`` to ``shape``."""
    x = as_array(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)
    lead = len(shape) - x.ndim
    summed = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1)

    def rule(g):
        return (g.sum(axis=summed).reshape(x.shape) if summed else g,)

    return record("expand", np.array(out), (x,), rule)


def zeros(shape, requires_grad: bool = False) -> Array:
    return Array(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Array:
    return Array(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------- verification

def grad_check(f: Callable[[Array], Array], x: Array, eps: float = 1e-4,
               indices: Sequence[int] | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``x`` must be a leaf with ``requires_grad``; it is perturbed in place and
    restored. ``indices`` restricts the check to those flat positions.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not (x.requires_grad and x.is_leaf):
        raise ValueError("grad_check needs a leaf Array with requires_grad=True")
    x.zero_grad()
    out = f(x)
    if out.shape != ():
        raise ShapeError(f"grad_check: f returned shape {out.shape}, expected scalar")
    backward(out)
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    worst = 0.0
    with no_grad():
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = analytic[i]
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
