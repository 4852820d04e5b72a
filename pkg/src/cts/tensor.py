"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the op set the small models and pruning objectives need:
elementwise arithmetic with broadcasting, matmul, 2-D convolution, relu,
sigmoid, exp/log, log-softmax, reductions, slicing/concat and the L2 norm.
Backward rules for everything except convolution are themselves composed of
these primitives, so gradients can be differentiated again (needed when an
objective is a function of a gradient). Convolution's backward is plain
numpy; requesting a second derivative through it raises.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True
_finite_checks = True


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NonFiniteError(TensorError):
    def __init__(self, op: str):
        super().__init__(f"{op}: produced non-finite values")
        self.op = op


class GraphError(TensorError):
    pass


class SecondOrderUnsupportedError(GraphError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def set_default_dtype(dtype) -> None:
    """Select float64 (default) or float32 for newly created tensors."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be np.float32 or np.float64")
    DEFAULT_DTYPE = dtype


class Tensor:
    """An immutable value in a computation graph.

    ``_vjp(out_grad)`` returns one gradient Tensor per parent (None for
    parents that do not require grad). ``_second_order`` marks whether that
    vjp is itself built from tracked primitives.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op", "_second_order")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _vjp=None,
                 _op: str = "leaf", _second_order: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op
        self._second_order = _second_order

    # -- basic introspection ------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_as_tensor(other), power(self, -1.0))

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable,
          second_order: bool = True) -> Tensor:
    if _finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    if not requires:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp,
                  _op=op, _second_order=second_order)


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.data.ndim - len(shape)
    if extra > 0:
        grad = sum_(grad, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = sum_(grad, axis=axes, keepdims=True)
    if grad.shape != shape:
        grad = reshape(grad, shape)
    return grad


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make(out, "mul", (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (mul(g, mul(Tensor(np.asarray(p)), power(a, p - 1.0))),)

    return _make(out, "pow", (a,), vjp)


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def absolute(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        # subgradient 0 at exactly 0 (sign(0) == 0)
        return (mul(g, Tensor(np.sign(a.data))),)

    return _make(np.abs(a.data), "abs", (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)

    def vjp(g):
        # derivative at exactly 0 defined as 0
        return (mul(g, Tensor((a.data > 0).astype(a.data.dtype))),)

    return _make(np.maximum(a.data, 0.0), "relu", (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _stable_sigmoid(a.data)

    def vjp(g):
        # recompute through the graph so double-backward stays exact
        s = sigmoid(a)
        return (mul(g, mul(s, add(1.0, neg(s)))),)

    return _make(out, "sigmoid", (a,), vjp)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (mul(g, power(a, -1.0)),))


# -- reductions / structure ---------------------------------------------------

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        gd = g
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            shp = list(a.shape)
            for i in ax:
                shp[i % a.data.ndim] = 1
            gd = reshape(g, tuple(shp))
        return (broadcast_to(gd, a.shape),)

    return _make(out, "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        n = a.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i % a.data.ndim] for i in ax]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape)
    return _make(np.ascontiguousarray(out), "broadcast", (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)
    return _make(out, "reshape", (a,), lambda g: (reshape(g, a.shape),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def narrow(a, idx) -> Tensor:
    """Slice a tensor; gradient scatters back into a zero tensor."""
    a = _as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        return (embed(g, a.shape, idx),)

    return _make(np.ascontiguousarray(out), "slice", (a,), vjp)


def embed(a, shape, idx) -> Tensor:
    """Place ``a`` into a zeros(shape) at ``idx``; adjoint of narrow."""
    a = _as_tensor(a)
    out = np.zeros(shape, dtype=a.data.dtype)
    out[idx] = a.data

    def vjp(g):
        return (narrow(g, idx),)

    return _make(out, "embed", (a,), vjp)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for p, off, sz in zip(parts, offsets, sizes):
            idx = [slice(None)] * out.ndim
            idx[axis] = slice(int(off), int(off + sz))
            grads.append(narrow(g, tuple(idx)))
        return tuple(grads)

    return _make(out, "concat", tuple(parts), vjp)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(out, "matmul", (a, b), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax composed from primitives.

    The max shift is a constant; it does not change the value or gradient.
    """
    a = _as_tensor(a)
    shift = Tensor(np.max(a.data, axis=axis, keepdims=True))
    z = a - broadcast_to(shift, a.shape)
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return z - broadcast_to(lse, a.shape)


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


def l2_norm(a) -> Tensor:
    a = _as_tensor(a)
    return sqrt(sum_(mul(a, a)))


# -- convolution / pooling ----------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols6[:, :, :, :, i, j]
    if padding:
        return xp[:, :, padding:hp - padding, padding:wp - padding]
    return xp


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation), NCHW input, OIHW filters.

    Backward is plain numpy, so differentiating *through* this backward
    (second order) is unsupported and raises during tracked re-backward.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n = x.shape[0]
    co, ci, kh, kw = w.shape
    cols, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    out = (cols @ w.data.reshape(co, -1).T).reshape(n, oh, ow, co).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.data.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = g2 @ w.data.reshape(co, -1)
        gx = _col2im(gcols, x.shape, kh, kw, stride, padding)
        return Tensor(gx), Tensor(gw)

    return _make(np.ascontiguousarray(out), "conv2d", (x, w), vjp, second_order=False)


def avg_pool2d(x, k: int) -> Tensor:
    """k-by-k average pooling; spatial dims must divide k."""
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d", x.shape, (k, k))
    r = reshape(x, (n, c, h // k, k, w // k, k))
    return mean(r, axis=(3, 5))


# -- backward -----------------------------------------------------------------

def backward(root: Tensor, wrt: Sequence[Tensor] | None = None,
             create_graph: bool = False) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar root.

    Returns a map from id(tensor) to its gradient for every reachable tensor
    that requires grad. If ``wrt`` is given, each requested tensor must be
    tracked and reachable, and only those gradients are returned (zeros for
    reachable-but-unused is an error only if untracked).
    """
    if root.size != 1:
        raise GraphError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward root is not part of a tracked graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Tensor] = {
        id(root): Tensor(np.ones(root.shape, dtype=root.data.dtype))
    }

    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            if create_graph and not node._second_order:
                raise SecondOrderUnsupportedError(
                    f"op '{node._op}' does not support double-backward")
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                cur = grads.get(id(p))
                grads[id(p)] = pg if cur is None else add(cur, pg)

    if wrt is not None:
        out: dict[int, Tensor] = {}
        for t in wrt:
            if not t.requires_grad:
                raise GraphError("gradient requested for an untracked tensor")
            g = grads.get(id(t))
            if g is None:
                g = Tensor(np.zeros(t.shape, dtype=t.data.dtype))
            out[id(t)] = g
        return out
    return grads


def grad(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Convenience wrapper: gradients of ``root`` for each tensor in ``wrt``."""
    gmap = backward(root, wrt=wrt, create_graph=create_graph)
    return [gmap[id(t)] for t in wrt]


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                     h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
