"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model computation is expressed through the primitives in this module:
elementwise ops, matmul, softmax over the last dimension, and layer norm.
Applying a primitive records a node (operation kind, parents, and a
vector-Jacobian closure); ``backward`` walks the recorded graph once in
reverse topological order and accumulates gradients into ``.grad``.

Broadcasting is deliberately restricted: a binary op is legal only when the
result shape equals one of the operand shapes (e.g. bias rows, trailing
singleton axes). Anything that would *create* a new shape is a ShapeError,
which keeps shape bugs loud.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import MaskError, NumericError, ShapeError

# Additive pre-softmax mask value. exp(x - max) underflows to exactly 0.0
# for masked entries, so excluded positions get weight 0 bit-exactly.
MASK_FILL = -1e30

_GRAD_ENABLED = True
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf checks after every primitive (slow; for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph recording inside the block; forward values only."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense float64 array plus the graph edge that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Same values, cut from the graph."""
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{req})"

    # -- operator sugar -------------------------------------------------
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

    # -- method sugar ----------------------------------------------------
    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def gelu(self):
        return gelu(self)

    def asinh(self):
        return asinh(self)

    def sinh(self):
        return sinh(self)

    def abs(self):
        return abs_(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) != 1 or isinstance(axes[0], int) else axes[0])

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by primitive {op!r}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out._op = op
    return out


def _binary_result_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb:
        return sa
    try:
        rs = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if rs != sa and rs != sb:
        raise ShapeError(
            f"{op}: broadcasting {sa} with {sb} would create new shape {rs}; "
            "only singleton expansion onto the larger operand is supported"
        )
    return rs


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_result_shape("add", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_result_shape("sub", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_result_shape("mul", a.shape, b.shape)

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_result_shape("div", a.shape, b.shape)
    if np.any(b.data == 0.0):
        raise NumericError("div: divisor contains exact zeros")

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), vjp)


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g / (2.0 * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner),)

    return _make(out, "gelu", (a,), vjp)


def asinh(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.arcsinh(x), "asinh", (a,), lambda g: (g / np.sqrt(1.0 + x * x),))


def sinh(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.sinh(x), "sinh", (a,), lambda g: (g * np.cosh(x),))


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _make(np.abs(x), "abs", (a,), lambda g: (g * np.sign(x),))


UNARY_OPS = {
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "sigmoid": sigmoid,
    "gelu": gelu,
    "asinh": asinh,
    "sinh": sinh,
    "abs": abs_,
}

BINARY_OPS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name."""
    if kind in UNARY_OPS:
        if b is not None:
            raise ShapeError(f"elementwise {kind!r} is unary")
        return UNARY_OPS[kind](a)
    if kind in BINARY_OPS:
        if b is None:
            raise ShapeError(f"elementwise {kind!r} needs two operands")
        return BINARY_OPS[kind](a, b)
    raise ShapeError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# matmul / structural
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must match exactly, or one operand must be 2-D (then it is
    shared across the other's leading axes, as for weight matrices).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dimension mismatch: {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b and lead_a != () and lead_b != ():
        raise ShapeError(f"matmul leading dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if a.ndim == 2 and ga.ndim > 2:
            ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *gb.shape[-2:]).sum(axis=0)
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    if math.prod(shape) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tensor_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, "sum", (a,), vjp)


def tensor_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes) if a.ndim else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(out, "mean", (a,), vjp)


# ---------------------------------------------------------------------------
# fused primitives
# ---------------------------------------------------------------------------

def softmax_lastdim(a, keep=None) -> Tensor:
    """Softmax over the last axis.

    ``keep`` is an optional boolean array broadcastable to ``a``; False
    positions receive exactly zero weight (additive -1e30 before the exp).
    A row with no True entry raises MaskError.
    """
    a = _as_tensor(a)
    x = a.data
    if keep is not None:
        keepb = np.broadcast_to(np.asarray(keep, dtype=bool), x.shape)
        if not keepb.any(axis=-1).all():
            raise MaskError("softmax_lastdim: a row is fully masked")
        x = x + np.where(keepb, 0.0, MASK_FILL)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if keep is not None:
        e = np.where(keepb, e, 0.0)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        t = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - t),)

    return _make(s, "softmax_lastdim", (a,), vjp)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return _make(out, "layer_norm", (a, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` for every requires_grad node.

    Repeated calls (without clearing grads) keep accumulating.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            key = id(p)
            pending[key] = pg if key not in pending else pending[key] + pg
