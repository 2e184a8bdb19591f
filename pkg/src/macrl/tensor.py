"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable op is a plain function taking and returning :class:`Tensor`.
When any input requires a gradient (and recording is enabled) the output keeps a
reference to its inputs plus a closure mapping the output gradient to input
gradients; :func:`backward` walks that graph once in reverse topological order.

Broadcasting rules (the only ones accepted by ``add``/``sub``/``mul``/``div``):

* identical shapes;
* leading-axis broadcast: the shorter shape is a suffix of the longer one
  (bias vectors, scalars);
* keepdims broadcast: equal rank where each axis pair is equal or one side is 1
  (reductions taken with ``keepdims=True``).

Anything else is rejected with a ``ShapeError`` naming the op and both shapes.
``matmul`` contracts the last axis of ``a`` with the second-to-last of ``b``;
``b`` is either a 2-D matrix shared across ``a``'s leading axes, or has exactly
the same leading axes as ``a``.

gelu uses the tanh approximation
``0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))``.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)
_node_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op: str | None = None
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

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
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = grad_fn
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.size != 1:
        raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return

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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# --- broadcasting ----------------------------------------------------------

def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] == short:
        return
    if len(a) == len(b) and all(x == y or x == 1 or y == 1 for x, y in zip(a, b)):
        return
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# --- elementwise binary ----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * x.data.dtype.type(c), (x,), lambda g: (g * c,))


# --- linear algebra / layout ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make("matmul", ad @ bd, (a, b), grad_fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and p != q for i, (p, q) in enumerate(zip(ref, t.shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=ax)))


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Select rows along axis ``index.ndim - 1``.

    ``x`` of shape (B, N, ...) with ``index`` of shape (B, K) gives (B, K, ...);
    a 1-D ``index`` of shape (K,) selects rows of an (N, ...) tensor.
    """
    index = np.asarray(index)
    if not np.issubdtype(index.dtype, np.integer):
        raise ShapeError(f"gather_rows: index must be integer, got {index.dtype}")
    ax = index.ndim - 1
    if x.ndim <= ax or x.shape[:ax] != index.shape[:-1]:
        raise ShapeError(f"gather_rows: incompatible shapes {x.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[ax]):
        raise ShapeError(f"gather_rows: index out of range for shape {x.shape}")
    idx = index.reshape(index.shape + (1,) * (x.ndim - index.ndim))
    out = np.take_along_axis(x.data, idx, axis=ax)
    src = x.shape

    def grad_fn(g):
        gx = np.zeros(src, dtype=g.dtype)
        lead = np.indices(index.shape, sparse=True)[:-1]
        np.add.at(gx, (*lead, index), g)
        return (gx,)

    return _make("gather_rows", out, (x,), grad_fn)


# --- reductions ------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    return _make("sum", x.data.sum(axis=axes, keepdims=keepdims), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept), src).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    src = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))
    count = int(np.prod([src[a] for a in axes])) if axes else 1
    return _make("mean", x.data.mean(axis=axes, keepdims=keepdims), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept) / count, src).copy(),))


# --- elementwise unary -----------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)
    return _make("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _make("abs", np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * (xd + 0.044715 * x2 * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def grad_fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (x,), grad_fn)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _make("softmax", out, (x,),
                 lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, via a shifted log-sum-exp."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(out)
    return _make("log_softmax", out, (x,),
                 lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each last-axis slice by max(norm, eps)."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    small = norm <= eps

    def grad_fn(g):
        proj = g - out * (g * out).sum(axis=-1, keepdims=True)
        return (np.where(small, g, proj) / denom,)

    return _make("l2_normalize", out, (x,), grad_fn)


# --- registry ---------------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "gather_rows": gather_rows,
    "mean": mean,
    "sum": sum_,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "abs": abs_,
    "gelu": gelu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "l2_normalize": l2_normalize,
}


def eval_op(kind: str, *inputs, **attrs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **attrs)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor | np.ndarray, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|).

    ``f`` must map a tensor shaped like ``point`` to a scalar tensor. Any
    non-finite evaluation makes the reported error infinite.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, copy=True)
    x = Tensor(base.copy(), requires_grad=True)
    try:
        out = f(x)
        backward(out)
    except NonFiniteError:
        return math.inf
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    worst = 0.0
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            vals, steps = [], []
            for sign in (1.0, -1.0):
                probe = flat.copy()
                probe[i] += sign * eps
                steps.append(float(probe[i]))
                try:
                    vals.append(f(Tensor(probe.reshape(base.shape))).item())
                except NonFiniteError:
                    return math.inf
            # the realised step differs from eps at 32-bit
            fd = (vals[0] - vals[1]) / (steps[0] - steps[1])
            if not math.isfinite(fd):
                return math.inf
            err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
