"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse
topological order.

Image tensors use NHWC layout and convolution kernels are stored as
``(kh, kw, c_in, c_out)``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Raised when an op receives inputs of incompatible shape."""


def _shape_error(op: str, *shapes) -> ShapeError:
    return ShapeError(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


@contextlib.contextmanager
def no_grad():
    """Run ops without recording the graph (evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, _parents=tuple(parents), _backward=backward)
    return Tensor(data, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)),
                 "div")


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(pick_a, g, 0.0), a.shape),
                            _unbroadcast(np.where(pick_a, 0.0, g), b.shape)),
                 "minimum")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def remainder(x, period: float) -> Tensor:
    """``x mod period`` into ``[0, period)``; derivative 1 away from the wrap points."""
    x = as_tensor(x)
    out = np.mod(x.data, period)
    return _make(out, (x,), lambda g: (g,), "remainder")


# ---------------------------------------------------------------------------
# reductions and shape


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise _shape_error("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, xs, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------------------
# linear algebra and network layers


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """Fully-connected layer ``x @ weight + bias`` for ``x`` of shape (N, in)."""
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def _conv_out(n: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2D cross-correlation with zero padding.

    x: (B, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[2]:
        raise _shape_error("conv2d", x.shape, weight.shape)
    B, H, W, cin = x.shape
    kh, kw, _, cout = weight.shape
    ho = _conv_out(H, kh, stride, padding, dilation)
    wo = _conv_out(W, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, weight.shape)

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = []
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            windows.append(xp[:, r0:r0 + stride * (ho - 1) + 1:stride,
                              c0:c0 + stride * (wo - 1) + 1:stride, :])
    cols = np.stack(windows, axis=3).reshape(B * ho * wo, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ w2).reshape(B, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(B * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gcols = (g2 @ w2.T).reshape(B, ho, wo, kh * kw, cin)
        gxp = np.zeros_like(xp)
        for n in range(kh * kw):
            r0, c0 = (n // kw) * dilation, (n % kw) * dilation
            gxp[:, r0:r0 + stride * (ho - 1) + 1:stride,
                c0:c0 + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, n, :]
        gx = gxp[:, padding:padding + H, padding:padding + W, :]
        return gx, gw

    result = _make(out, (x, weight), backward, "conv2d")
    return result if bias is None else add(result, bias)


def max_pool2d(x, size: int, stride: int) -> Tensor:
    """Max pooling over NHWC maps.

    Output extent is ``ceil((n - size) / stride) + 1`` (at least 1); windows
    hanging over the border only see real pixels.  On ties the gradient goes
    to the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    if x.ndim != 4 or size < 1 or stride < 1 or stride > size:
        raise _shape_error("max_pool2d", x.shape)
    B, H, W, C = x.shape
    ho = -(-max(H - size, 0) // stride) + 1
    wo = -(-max(W - size, 0) // stride) + 1
    ph = (ho - 1) * stride + size - H
    pw = (wo - 1) * stride + size - W
    xp = np.pad(x.data, ((0, 0), (0, max(ph, 0)), (0, max(pw, 0)), (0, 0)), constant_values=-np.inf)
    windows = np.stack(
        [xp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
         for i in range(size) for j in range(size)],
        axis=-1,
    )
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gxp = np.zeros_like(xp)
        for n in range(size * size):
            i, j = divmod(n, size)
            gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += \
                np.where(arg == n, g, 0.0)
        return (gxp[:, :H, :W, :],)

    return _make(out, (x,), backward, "max_pool2d")


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling of an NHWC map by an integer factor (align corners)."""
    x = as_tensor(x)
    if x.ndim != 4 or factor < 1:
        raise _shape_error("upsample_bilinear", x.shape)
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample_bilinear")
    _, H, W, _ = x.shape
    mh = interp_matrix(H, H * factor)
    mw = interp_matrix(W, W * factor)
    out = np.einsum("oh,bhwc,pw->bopc", mh, x.data, mw, optimize=True)
    return _make(out, (x,), lambda g: (np.einsum("oh,bopc,pw->bhwc", mh, g, mw, optimize=True),),
                 "upsample_bilinear")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                 "softmax")


# ---------------------------------------------------------------------------
# dispatch by name

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "minimum": minimum,
    "log": log, "exp": exp, "square": square, "relu": relu, "sigmoid": sigmoid,
    "remainder": remainder, "sum": sum_, "mean": mean, "reshape": reshape,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "matmul": matmul, "linear": linear, "conv2d": conv2d, "max_pool2d": max_pool2d,
    "upsample_bilinear": upsample_bilinear, "softmax": softmax, "log_softmax": log_softmax,
}


def op_forward(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Evaluate op ``kind`` on ``inputs`` with keyword ``attrs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Nodes reachable from a root, inputs before outputs."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
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
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def position(self) -> dict[int, int]:
        return {id(n): i for i, n in enumerate(self.nodes)}


def backward(loss: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Back-propagate from scalar ``loss``.

    Returns a map from every node that requires grad to its gradient, and
    also stores leaf gradients in ``.grad`` (overwriting previous values).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = graph or Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        result[node] = g
        if node._backward is None:
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return result


def grad_check(fn: Callable[[Tensor], Tensor], point, eps: float = 1e-6) -> float:
    """Max relative error between the analytic gradient and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x0)

    numeric = np.empty_like(x0)
    flat = numeric.reshape(-1)
    for k in range(x0.size):
        vals = []
        for sign in (1.0, -1.0):
            xp = x0.copy()
            xp.reshape(-1)[k] += sign * eps
            with no_grad():
                v = fn(Tensor(xp)).item()
            if not np.isfinite(v):
                raise FloatingPointError("grad_check: non-finite function value")
            vals.append(v)
        flat[k] = (vals[0] - vals[1]) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))

