"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation whose inputs track
gradients creates a :class:`Node` that remembers its inputs and a closure
computing the vector-Jacobian product. :func:`backward` orders the reachable
nodes into a :class:`Tape` and sweeps it once in reverse.

Broadcasting is deliberately limited to scalar-with-tensor; anything else
has to go through an explicit op (``expand``, ``bias_add``, ...).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "Node", "Tape", "ShapeError", "DomainError", "GradientError",
    "tensor", "zeros", "precision", "default_dtype", "no_grad",
    "add", "sub", "mul", "div", "neg", "relu", "clamp", "exp", "log", "sqrt",
    "elementwise", "matmul", "transpose", "reshape", "flatten", "expand",
    "bias_add", "channel_affine", "conv2d", "maxpool2d", "pick",
    "reduce", "sum", "mean", "dot", "l2norm", "softmax", "log_softmax",
    "backward", "finite_diff_gradient",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """An operand lies outside the operation's domain (e.g. division by zero)."""


class GradientError(RuntimeError):
    """``backward`` was called on something it cannot differentiate."""


_DTYPE = np.dtype(np.float32)
_state = threading.local()
_counter = itertools.count()


def default_dtype() -> np.dtype:
    return _DTYPE


@contextmanager
def precision(dtype: str | type | np.dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors.

    ``with precision("float64"): ...`` is what the gradient checks use.
    """
    global _DTYPE
    new = np.dtype(dtype)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {new}")
    old, _DTYPE = _DTYPE, new
    try:
        yield
    finally:
        _DTYPE = old


@contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them on any tape."""
    old = getattr(_state, "grad", True)
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class Node:
    """One recorded operation: its output, inputs and backward closure."""

    __slots__ = ("op", "inputs", "vjp", "index")

    def __init__(self, op: str, inputs: tuple[Tensor, ...],
                 vjp: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.index = next(_counter)

    def __repr__(self) -> str:
        return f"Node({self.op}, #{self.index})"


class Tensor:
    """n-dimensional real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=_DTYPE if dtype is None else dtype, copy=True)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> Tensor:
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.node = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=4, threshold=8)}{flag})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def relu(self): return relu(self)
    def clamp(self, lo, hi): return clamp(self, lo, hi)
    def sum(self, axis=None): return sum(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    @property
    def T(self): return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape: Sequence[int], requires_grad: bool = False) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=_DTYPE), requires_grad)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...],
          vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    needs = getattr(_state, "grad", True) and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs)
    if needs:
        out.node = Node(op, inputs, vjp)
    return out


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce a gradient back onto a scalar operand that was broadcast."""
    if t.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=g.dtype)
    return g


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor]:
    # bare numbers take the dtype of the tensor they meet
    if isinstance(a, Tensor) and not isinstance(b, Tensor) and np.ndim(b) == 0:
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor) and np.ndim(a) == 0:
        a = Tensor(a, dtype=b.dtype)
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (a.ndim == 0 or b.ndim == 0):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unscalar(g, a), _unscalar(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unscalar(g, a), _unscalar(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("div: divisor contains zero")
    out = ad / bd
    return _make("div", out, (a, b),
                 lambda g: (_unscalar(g / bd, a), _unscalar(-g * out / bd, b)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient 0 at 0
    return _make("relu", np.where(mask, a.data, 0).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    if lo > hi:
        raise DomainError(f"clamp: lo={lo} exceeds hi={hi}")
    out = np.minimum(np.maximum(a.data, a.dtype.type(lo)), a.dtype.type(hi))
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clamp", out, (a,), lambda g: (g * inside,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: nonpositive input")
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1)

    def vjp(g):
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype),)
    return _make("sqrt", out, (a,), vjp)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None, lo: float | None = None,
                hi: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, relu or clamp."""
    if kind in _ELEMENTWISE:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _ELEMENTWISE[kind](a, b)
    if kind == "relu":
        return relu(a)
    if kind == "clamp":
        if lo is None or hi is None:
            raise ValueError("clamp needs lo and hi")
        return clamp(a, lo, hi)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions {a.shape[1]} and {b.shape[0]} disagree")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def flatten(a) -> Tensor:
    """Collapse every axis after the first."""
    a = _as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def expand(a, n: int) -> Tensor:
    """Stack ``n`` copies of ``a`` along a new leading axis."""
    a = _as_tensor(a)
    out = np.broadcast_to(a.data, (n,) + a.shape)
    return _make("expand", out, (a,), lambda g: (g.sum(axis=0),))


def bias_add(x, bias) -> Tensor:
    """Add a per-feature bias to the rows of a 2-D tensor."""
    x, bias = _as_tensor(x), _as_tensor(bias)
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: bias {bias.shape} does not match rows of {x.shape}")
    return _make("bias_add", x.data + bias.data, (x, bias),
                 lambda g: (g, g.sum(axis=0)))


def channel_affine(x, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``x * scale[c] + shift[c]`` on an N×C×H×W tensor; scale/shift are constants."""
    x = _as_tensor(x)
    c = x.shape[1]
    scale = np.asarray(scale, dtype=x.dtype).reshape(1, c, 1, 1)
    shift = np.asarray(shift, dtype=x.dtype).reshape(1, c, 1, 1)
    return _make("channel_affine", x.data * scale + shift, (x,),
                 lambda g: (g * scale,))


def pick(a, index: np.ndarray) -> Tensor:
    """Gather ``a[i, index[i]]`` from a 2-D tensor, giving a length-N vector."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise ShapeError(f"pick: index shape {index.shape} does not match {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[rows, index] = g
        return (out,)
    return _make("pick", a.data[rows, index], (a,), vjp)


# ---------------------------------------------------------------- conv / pool

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, w, bias, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding.

    Args:
        x: N×C×H×W input.
        w: F×C×kh×kw kernels.
        bias: length-F bias.
        stride: step between windows, >= 1.
        pad: zero padding added on every side.
    """
    x, w, bias = _as_tensor(x), _as_tensor(w), _as_tensor(bias)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    f, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if bias.shape != (f,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({f},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    if ho < 1 or wo < 1 or kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for {h}x{wd} with pad {pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: N, C, Ho, Wo, kh, kw -> rows (N, Ho, Wo), cols (C, kh, kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(f, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gw = (gmat.T @ cols).reshape(w.shape)
        gb = gmat.sum(axis=0)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return gx, gw, gb
    return _make("conv2d", out, (x, w, bias), vjp)


def maxpool2d(x, k: int, stride: int | None = None) -> Tensor:
    """Window maxima; ties send the gradient to the first element in row-major order."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects N×C×H×W, got {x.shape}")
    n, c, h, wd = x.shape
    if k > h or k > wd:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{wd}")
    if stride < 1:
        raise ShapeError("maxpool2d: stride must be >= 1")
    ho, wo = _conv_out(h, k, stride, 0), _conv_out(wd, k, stride, 0)
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sel = np.where(arg == i * k + j, g, 0)
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
        return (gx,)
    return _make("maxpool2d", np.ascontiguousarray(out), (x,), vjp)


# ---------------------------------------------------------------- reductions

def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)
    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return div(sum(a, axis), float(count))


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("dot", np.asarray(ad @ bd), (a, b), lambda g: (g * bd, g * ad))


def l2norm(a, axis: int | None = None) -> Tensor:
    """Euclidean norm over all elements, or along ``axis``. Gradient at 0 is 0."""
    a = _as_tensor(a)
    ad = a.data
    out = np.sqrt((ad * ad).sum(axis=axis))
    out = np.asarray(out)

    def vjp(g):
        o = out if axis is None else np.expand_dims(out, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(o > 0, o, 1)
        return (np.where(o > 0, gg * ad / safe, 0).astype(ad.dtype),)
    return _make("l2norm", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make("log_softmax", out, (a,),
                 lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def reduce(kind: str, a, b=None, axis: int | None = None) -> Tensor:
    """Dispatch by name: sum, mean, dot, l2norm or softmax (softmax is over the last axis)."""
    if kind == "sum":
        return sum(a, axis)
    if kind == "mean":
        return mean(a, axis)
    if kind == "dot":
        if b is None:
            raise ValueError("dot needs two operands")
        return dot(a, b)
    if kind == "l2norm":
        return l2norm(a, axis)
    if kind == "softmax":
        return softmax(a)
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- backward

class Tape:
    """Nodes reachable from a result, in recording (hence topological) order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> Tape:
        seen: set[int] = set()
        found: list[Node] = []
        stack = [out.node] if out.node is not None else []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            found.append(node)
            for inp in node.inputs:
                if inp.node is not None and id(inp.node) not in seen:
                    stack.append(inp.node)
        found.sort(key=lambda nd: nd.index)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every leaf that requires grad.

    Gradients add onto any existing ``.grad`` buffer; call ``zero_grad`` between
    independent passes. Returns the tape that was swept.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss is detached from every tensor that requires grad")
    tape = Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {}
    if loss.node is None:  # loss is itself a leaf
        seed = np.ones(loss.shape, dtype=loss.dtype)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return tape
    grads[id(loss.node)] = np.ones(loss.shape, dtype=loss.dtype)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            gi = np.asarray(gi, dtype=inp.dtype)
            if inp.node is not None:
                key = id(inp.node)
                grads[key] = grads[key] + gi if key in grads else gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    return tape


def finite_diff_gradient(fn: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray,
                         h: float = 1e-3, coords: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Args:
        fn: maps a tensor to a scalar (tensor or float); must be deterministic.
        x: the evaluation point; not modified.
        h: step size, > 0.
        coords: optional flat indices to probe; other entries are left at 0.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords

    def val(arr):
        with no_grad():
            out = fn(Tensor(arr, dtype=base.dtype))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        up = val(base)
        flat[i] = orig - h
        down = val(base)
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(base.shape)
