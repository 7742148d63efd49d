"""Dense tensors with reverse-mode automatic differentiation.

Every tensor wraps a numpy array. Operations on tensors that require
gradients record a node holding the parents and a closure mapping the
output gradient to parent gradients; :func:`backward` walks that graph
in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GraphError",
    "precision",
    "no_grad",
    "get_default_dtype",
    "tensor",
    "apply_primitive",
    "apply_structured",
    "backward",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "leaky_relu",
    "tanh",
    "absolute",
    "clamp_min",
    "sum",
    "mean",
    "max_reduce",
    "broadcast_to",
    "reshape",
    "transpose",
    "take",
    "concat",
    "stack",
    "matmul",
    "conv2d",
    "upsample_nearest",
    "softmax_channel",
    "log_softmax_channel",
    "pad",
]

LEAKY_SLOPE = 0.2

_DTYPES = {"single": np.float32, "double": np.float64}
_state = threading.local()


class GraphError(ValueError):
    """Raised for malformed graphs, shape errors and domain errors."""


def get_default_dtype() -> np.dtype:
    return np.dtype(getattr(_state, "dtype", np.float32))


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def precision(mode: str):
    """Set the default floating dtype (``"single"`` or ``"double"``)."""
    if mode not in _DTYPES:
        raise ValueError(f"unknown precision {mode!r}; expected 'single' or 'double'")
    previous = get_default_dtype()
    _state.dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """N-dimensional value array taking part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            # float arrays keep their precision; lists and scalars take the default
            keep = isinstance(data, np.ndarray) and arr.dtype.kind == "f"
            dtype = arr.dtype if keep else get_default_dtype()
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
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

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

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


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    """Create a tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# graph helpers
# ---------------------------------------------------------------------------


def _as_operands(*values) -> list[Tensor]:
    tensors = [v for v in values if isinstance(v, Tensor)]
    if not tensors:
        dtype = get_default_dtype()
    else:
        dtype = tensors[0].dtype
        for t in tensors[1:]:
            if t.dtype != dtype:
                raise GraphError(f"precision mismatch: {dtype} and {t.dtype} in one graph")
    return [v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=dtype)) for v in values]


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out.op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GraphError(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise GraphError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    (a,) = _as_operands(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    (a,) = _as_operands(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    (a,) = _as_operands(a)
    if np.any(a.data <= 0):
        raise GraphError("log: operand must be strictly positive")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    (a,) = _as_operands(a)
    if np.any(a.data <= 0):
        raise GraphError("sqrt: operand must be strictly positive")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    (a,) = _as_operands(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    (a,) = _as_operands(a)
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def tanh(a) -> Tensor:
    (a,) = _as_operands(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def absolute(a) -> Tensor:
    """Elementwise |a|; subgradient 0 at 0."""
    (a,) = _as_operands(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) with zero gradient where the floor is active."""
    (a,) = _as_operands(a)
    mask = a.data > floor
    out = np.where(mask, a.data, floor).astype(a.dtype)
    return _make(out, (a,), lambda g: (g * mask,), "clamp_min")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    (a,) = _as_operands(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    (a,) = _as_operands(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise GraphError("mean: empty reduction")
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw, "mean")


def max_reduce(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis (or all). Ties route the gradient to the first maximum."""
    (a,) = _as_operands(a)
    if a.size == 0:
        raise GraphError("max_reduce: empty operand")
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        out = flat[idx]

        def bw_all(g):
            grad = np.zeros(a.size, dtype=a.dtype)
            grad[idx] = np.asarray(g).reshape(-1)[0]
            return (grad.reshape(a.shape),)

        result = np.full((1,) * a.ndim, out, dtype=a.dtype) if keepdims else np.asarray(out)
        return _make(result, (a,), bw_all, "max_reduce")

    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        return (grad,)

    return _make(out if keepdims else np.squeeze(out, axis), (a,), bw, "max_reduce")


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    (a,) = _as_operands(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise GraphError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def reshape(a, shape: Sequence[int]) -> Tensor:
    (a,) = _as_operands(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise GraphError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    (a,) = _as_operands(a)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _make(np.asarray(out, order="C"), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def take(a, index) -> Tensor:
    """Differentiable numpy indexing; repeated indices accumulate."""
    (a,) = _as_operands(a)
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(np.array(out, dtype=a.dtype), (a,), bw, "take")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = _as_operands(*tensors)
    if not parts:
        raise GraphError("concat: no operands")
    axis = axis % parts[0].ndim
    for p in parts[1:]:
        if p.ndim != parts[0].ndim or any(
            p.shape[i] != parts[0].shape[i] for i in range(p.ndim) if i != axis
        ):
            raise GraphError(f"concat: incompatible shapes {parts[0].shape} and {p.shape}")
    splits = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = _as_operands(*tensors)
    if not parts:
        raise GraphError("stack: no operands")
    if any(p.shape != parts[0].shape for p in parts):
        raise GraphError("stack: operands must share one shape")

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts], axis=axis), parts, bw, "stack")


# ---------------------------------------------------------------------------
# structured operations
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_operands(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise GraphError("matmul: scalar operand")
    if a.shape[-1] != b.shape[0 if b.ndim == 1 else -2]:
        raise GraphError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if bd.ndim == 1:
            return np.multiply.outer(g, bd), _unbroadcast(
                np.einsum("...i,...ij->j", g, ad), b.shape
            )
        if ad.ndim == 1:
            return g @ np.swapaxes(bd, -1, -2), _unbroadcast(np.multiply.outer(ad, g), b.shape)
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[:, i, j] = window.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * oh * ow)


def _conv_flat(x, weight, bias, padding):
    # Stride-1 path: with the padded image flattened per channel, kernel tap
    # (i, j) is a constant offset i * Wp + j, so one stacked matmul followed by
    # shifted slice-adds gives the cross-correlation on a (H, Wp) output grid.
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2:]
    oh, ow = hp - kh + 1, wp - kw + 1
    span = oh * wp
    flat = np.zeros((n, c, hp * wp + kw - 1), dtype=xp.dtype)
    flat[:, :, : hp * wp] = xp.reshape(n, c, -1)
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    stacked = weight.data.transpose(2, 3, 0, 1).reshape(kh * kw * o, c)
    y = np.matmul(stacked, flat)
    full = y[:, 0:o, 0:span].copy()
    for k in range(1, len(offsets)):
        full += y[:, k * o : (k + 1) * o, offsets[k] : offsets[k] + span]
    out = full.reshape(n, o, oh, wp)[:, :, :, :ow]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g_full = np.zeros((n, o, oh, wp), dtype=g.dtype)
        g_full[:, :, :, :ow] = g
        g_full = g_full.reshape(n, o, span)
        gy = np.zeros(y.shape, dtype=g.dtype)
        for k, off in enumerate(offsets):
            gy[:, k * o : (k + 1) * o, off : off + span] = g_full
        gw = np.matmul(gy, flat.transpose(0, 2, 1)).sum(axis=0)
        gw = gw.reshape(kh, kw, o, c).transpose(2, 3, 0, 1)
        gx = None
        if x.requires_grad:
            gflat = np.matmul(stacked.T, gy)[:, :, : hp * wp].reshape(n, c, hp, wp)
            gx = gflat[:, :, padding : padding + h, padding : padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return out, bw


def _conv_cols_path(x, weight, bias, stride, padding):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _conv_cols(xp, kh, kw, stride, oh, ow)
    w2 = weight.data.reshape(o, -1)
    out = (w2 @ cols).reshape(o, n, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(c, kh, kw, n, oh, ow)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return out, bw


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``x`` is (N, C, H, W), ``weight`` is (O, C, KH, KW) and ``bias`` is (O,).
    """
    operands = _as_operands(x, weight) if bias is None else _as_operands(x, weight, bias)
    x, weight = operands[:2]
    bias = operands[2] if bias is not None else None
    if x.ndim != 4 or weight.ndim != 4:
        raise GraphError(f"conv2d: expected rank-4 input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, kc, kh, kw = weight.shape
    if kc != c:
        raise GraphError(f"conv2d: kernel expects {kc} channels, input has {c}")
    if stride < 1 or padding < 0:
        raise GraphError("conv2d: stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise GraphError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    if bias is not None and bias.shape != (o,):
        raise GraphError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride == 1:
        out, bw = _conv_flat(x, weight, bias, padding)
    else:
        out, bw = _conv_cols_path(x, weight, bias, stride, padding)
    return _make(out, operands, bw, "conv2d")


def upsample_nearest(x, factor: int) -> Tensor:
    (x,) = _as_operands(x)
    if x.ndim != 4:
        raise GraphError(f"upsample_nearest: expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), bw, "upsample_nearest")


def softmax_channel(x) -> Tensor:
    (x,) = _as_operands(x)
    if x.ndim != 4:
        raise GraphError(f"softmax_channel: expected rank-4 input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax_channel")


def log_softmax_channel(x) -> Tensor:
    (x,) = _as_operands(x)
    if x.ndim != 4:
        raise GraphError(f"log_softmax_channel: expected rank-4 input, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax_channel")


def pad(x, width: int) -> Tensor:
    """Zero-pad the two spatial axes of a rank-4 tensor."""
    (x,) = _as_operands(x)
    if x.ndim != 4:
        raise GraphError(f"pad: expected rank-4 input, got {x.shape}")
    h, w = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (width, width), (width, width)))
    return _make(out, (x,), lambda g: (g[:, :, width : width + h, width : width + w],), "pad")


_PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "relu": relu,
    "leaky_relu": leaky_relu,
    "tanh": tanh,
    "abs": absolute,
    "sum": sum,
    "mean": mean,
    "max_reduce": max_reduce,
    "broadcast": broadcast_to,
}

_STRUCTURED: dict[str, Callable] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "conv2d_stride": conv2d,
    "upsample_nearest": upsample_nearest,
    "softmax_channel": softmax_channel,
    "log_softmax_channel": log_softmax_channel,
    "concat_channel": lambda *ts, **kw: concat(ts, axis=1),
    "pad": pad,
}


def apply_primitive(kind: str, operands: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``apply_primitive("add", [a, b])``."""
    try:
        fn = _PRIMITIVES[kind]
    except KeyError:
        raise GraphError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **attrs)


def apply_structured(kind: str, operands: Sequence, **attrs) -> Tensor:
    try:
        fn = _STRUCTURED[kind]
    except KeyError:
        raise GraphError(f"unknown structured op {kind!r}") from None
    return fn(*operands, **attrs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack_: list[tuple[Tensor, int]] = [(root, 0)]
    state[id(root)] = 1
    while stack_:
        node, i = stack_.pop()
        if i < len(node._parents):
            stack_.append((node, i + 1))
            parent = node._parents[i]
            if not parent.requires_grad:
                continue
            mark = state.get(id(parent))
            if mark == 1:
                raise GraphError("backward: computation graph contains a cycle")
            if mark is None:
                state[id(parent)] = 1
                stack_.append((parent, 0))
        else:
            state[id(node)] = 2
            order.append(node)
    return order


def backward(loss: Tensor) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Leaf tensors accumulate into ``.grad``; intermediate tensors have
    ``.grad`` overwritten. Returns the gradients of named leaves.
    """
    if loss.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        node.grad = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=parent.dtype)
    return named


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    floor: float = 1e-8,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` is re-evaluated from scratch for every perturbation, so it must
    read parameter values through the given tensors.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise GraphError("finite_difference_check: non-finite function value")
    backward(loss)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                up = f().item()
            flat[i] = orig - eps
            with no_grad():
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise GraphError("finite_difference_check: non-finite function value")
            numeric = (up - down) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
