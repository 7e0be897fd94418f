"""Dense N-dimensional arrays with reverse-mode differentiation.

Values live in row-major numpy buffers, in one of two precisions chosen at
construction time: float32 for training and inference, float64 for gradient
checking.  Every primitive validates its result, so overflow or a domain
error surfaces as :class:`NumericsError` instead of propagating NaN/Inf.

When any input of a primitive has ``requires_grad``, a :class:`TapeNode` is
recorded; :meth:`Tensor.backward` replays the recorded graph in reverse
topological order and accumulates gradients on the leaves.  Repeated
backward calls keep accumulating until the leaf grads are cleared.

Broadcasting follows numpy's trailing-axis rule and nothing more: aligned
from the right, each axis pair must match or one of them must be 1.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf as _erf
from scipy.special import expit as _sigmoid

from .errors import NumericsError, ShapeError

__all__ = [
    "Tensor",
    "TapeNode",
    "no_grad",
    "add",
    "mul",
    "matmul",
    "conv2d",
    "reshape",
    "transpose",
    "slice_",
    "concat",
    "flip",
    "exp",
    "log",
    "sqrt",
    "softplus",
    "gelu",
    "layer_norm",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "maximum",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

class _GradMode(threading.local):
    """Per-thread recording switch, so concurrent forwards stay independent."""

    enabled = True


_grad_mode = _GradMode()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (inference / oracle evals)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class TapeNode:
    """One recorded primitive: op name, input tensors and the backward rule.

    ``backward_fn`` maps the output gradient to per-input gradients (``None``
    for inputs that do not take one).  Saved intermediates live in the
    closure of ``backward_fn``.
    """

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(
        self,
        op: str,
        inputs: tuple["Tensor", ...],
        backward_fn: Callable[[np.ndarray], tuple],
    ):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional array of finite floats with optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            probe = np.asarray(data)
            dtype = probe.dtype if probe.dtype in _FLOAT_DTYPES else np.float32
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise TypeError(f"tensor dtype must be float32 or float64, got {dtype}")
        arr = np.ascontiguousarray(data, dtype=dtype)
        if not np.all(np.isfinite(arr)):
            raise NumericsError("tensor created from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- inspection ------------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        view = self.data.view()
        view.flags.writeable = False
        return view

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- autograd ---------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable leaf with d(self)/d(leaf).

        ``self`` must be scalar.  Leaf gradients accumulate across calls
        until cleared.  A detached (tapeless) scalar leaves grads absent.
        """
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        if self.node is None:
            if self.requires_grad:
                seed = np.ones_like(self.data)
                self.grad = seed if self.grad is None else self.grad + seed
            return

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t.node.inputs:
                stack.append((inp, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            node = t.node
            for inp, ig in zip(node.inputs, node.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if inp.node is None:
                    inp.grad = np.array(ig) if inp.grad is None else inp.grad + ig
                else:
                    held = grads.get(id(inp))
                    grads[id(inp)] = ig if held is None else held + ig

    # -- operator sugar ---------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        if isinstance(other, (int, float)):
            return Tensor(np.asarray(other, dtype=self.dtype))
        raise TypeError(f"cannot operate on Tensor and {type(other).__name__}")

    def __add__(self, other):
        return add(self, self._coerce(other))

    def __radd__(self, other):
        return add(self._coerce(other), self)

    def __sub__(self, other):
        other = self._coerce(other)
        return add(self, mul(other, Tensor(np.asarray(-1.0, dtype=self.dtype))))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return mul(self, self._coerce(other))

    def __rmul__(self, other):
        return mul(self._coerce(other), self)

    def __neg__(self):
        return mul(self, Tensor(np.asarray(-1.0, dtype=self.dtype)))

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only supported by python scalars")
        return mul(self, Tensor(np.asarray(1.0 / other, dtype=self.dtype)))

    def __matmul__(self, other):
        return matmul(self, self._coerce(other))


# -- wiring helpers --------------------------------------------------------


def _result(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericsError(f"{op} produced non-finite values (overflow or domain error)")
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    if _grad_mode.enabled and any(inp.requires_grad for inp in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, inputs, backward_fn)
    else:
        t.requires_grad = False
        t.node = None
    return t


def _check_dtypes(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise TypeError(f"{op}: mixed precisions {dt} and {t.dtype} in one graph")


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    for da, db in zip(reversed(a.shape), reversed(b.shape)):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of trailing-axis broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(ax for ax, d in enumerate(shape) if d == 1 and g.shape[ax] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = tuple(sorted(a % ndim for a in axis))
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate reduction axes {axis}")
    return out


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    a_shape, b_shape = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

    return _result("add", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a_data.shape), _unbroadcast(g * a_data, b_data.shape)

    return _result("mul", out, (a, b), backward)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties split the gradient evenly between operands."""
    _check_dtypes("elementwise_max", a, b)
    _check_broadcast("elementwise_max", a, b)
    out = np.maximum(a.data, b.data)
    a_data, b_data = a.data, b.data

    def backward(g):
        tie = (a_data == b_data) * 0.5
        ga = g * ((a_data > b_data) + tie)
        gb = g * ((b_data > a_data) + tie)
        return _unbroadcast(ga, a_data.shape), _unbroadcast(gb, b_data.shape)

    return _result("elementwise_max", out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ for {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} @ {b.shape} do not broadcast") from exc
    a_data, b_data = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ b_data.swapaxes(-1, -2), a_data.shape)
        gb = _unbroadcast(a_data.swapaxes(-1, -2) @ g, b_data.shape)
        return ga, gb

    return _result("matmul", out, (a, b), backward)


# -- structural ops ----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(x.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    x_shape = x.shape

    def backward(g):
        return (g.reshape(x_shape),)

    return _result("reshape", out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}")
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _result("transpose", out, (x,), backward)


def slice_(x: Tensor, key: tuple[slice, ...]) -> Tensor:
    if not isinstance(key, tuple):
        key = (key,)
    if len(key) > x.ndim:
        raise ShapeError(f"slice: {len(key)} indices for shape {x.shape}")
    for s in key:
        if not isinstance(s, slice) or s.step not in (None, 1):
            raise ShapeError("slice supports contiguous slices only")
    out = np.ascontiguousarray(x.data[key])
    x_shape, x_dtype = x.shape, x.dtype

    def backward(g):
        gx = np.zeros(x_shape, dtype=x_dtype)
        gx[key] = g
        return (gx,)

    return _result("slice", out, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    _check_dtypes("concat", *tensors)
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base) or any(
            i != axis and other[i] != base[i] for i in range(len(base))
        ):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {tensors[0].shape} on axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        pieces = []
        start = 0
        for n in sizes:
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(start, start + n)
            pieces.append(np.ascontiguousarray(g[tuple(idx)]))
            start += n
        return tuple(pieces)

    return _result("concat", out, tensors, backward)


def flip(x: Tensor, axis: int) -> Tensor:
    axis = axis % x.ndim
    out = np.ascontiguousarray(np.flip(x.data, axis=axis))

    def backward(g):
        return (np.ascontiguousarray(np.flip(g, axis=axis)),)

    return _result("flip", out, (x,), backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result("exp", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    x_data = x.data

    def backward(g):
        return (g / x_data,)

    return _result("log", out, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def backward(g):
        return (g * (0.5 / out),)

    return _result("sqrt", out, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)
    x_data = x.data

    def backward(g):
        return (g * _sigmoid(x_data),)

    return _result("softplus", out, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x_data = x.data
    cdf = 0.5 * (1.0 + _erf(x_data * _INV_SQRT2))
    out = x_data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x_data * x_data) * _INV_SQRT2PI
        return (g * (cdf + x_data * pdf),)

    return _result("gelu", out, (x,), backward)


# -- normalization and reductions ---------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the trailing (channel) axis with learnable scale/shift."""
    _check_dtypes("layer_norm", x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: scale/shift shapes {gamma.shape}/{beta.shape} do not match channels {c}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data
    gamma_data = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dbeta = g.sum(axis=lead)
        dgamma = (g * xhat).sum(axis=lead)
        dxhat = g * gamma_data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv_std * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _result("layer_norm", out, (x, gamma, beta), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((g - inner) * out,)

    return _result("softmax_axis", out, (x,), backward)


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    for ax in axes:
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    x_shape = x.shape

    def backward(g):
        if keepdims:
            return (np.broadcast_to(g, x_shape),)
        return (_expand_reduced(g, x_shape, axes),)

    return _result("reduce_sum", out, (x,), backward)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    out = x.data.mean(axis=axes, keepdims=keepdims)
    x_shape = x.shape

    def backward(g):
        scaled = g / count
        if keepdims:
            return (np.broadcast_to(scaled, x_shape),)
        return (_expand_reduced(scaled, x_shape, axes),)

    return _result("reduce_mean", out, (x,), backward)


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient splits evenly among tied maxima."""
    axes = _normalize_axes(axis, x.ndim)
    kept = x.data.max(axis=axes, keepdims=True)
    out = kept if keepdims else kept.reshape(
        tuple(d for ax, d in enumerate(x.shape) if ax not in axes)
    )
    x_data, x_shape = x.data, x.shape

    def backward(g):
        mask = (x_data == kept).astype(x_data.dtype)
        ties = mask.sum(axis=axes, keepdims=True)
        ge = np.broadcast_to(g, kept.shape) if keepdims else _expand_reduced(g, kept.shape, axes)
        return (mask * (ge / ties),)

    return _result("reduce_max", np.ascontiguousarray(out), (x,), backward)


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    padding: str = "same",
    groups: int = 1,
) -> Tensor:
    """2-D convolution over the two axes before the trailing channel axis.

    ``x``: (..., H, W, C_in); ``w``: (kh, kw, C_in/groups, C_out);
    zero padding, ``"same"`` (ceil(H/stride) output) or ``"valid"``.
    ``groups == C_in == C_out`` selects the depthwise fast path.
    """
    if x.ndim < 3:
        raise ShapeError(f"conv2d: input must be at least 3-d, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d (kh, kw, cin, cout), got {w.shape}")
    operands = (x, w) if b is None else (x, w, b)
    _check_dtypes("conv2d", *operands)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be positive, got {stride}")
    if padding not in ("same", "valid"):
        raise ShapeError(f"conv2d: unknown padding {padding!r}")

    lead = x.shape[:-3]
    h, wdt, cin = x.shape[-3:]
    kh, kw, cin_g, cout = w.shape
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"conv2d: groups={groups} does not divide channels {cin}->{cout}")
    if cin_g != cin // groups:
        raise ShapeError(
            f"conv2d: kernel expects {cin_g} input channels per group, input has {cin}/{groups}"
        )
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {cout} output channels")

    if padding == "same":
        oh = -(-h // stride)
        ow = -(-wdt // stride)
        pad_h = max((oh - 1) * stride + kh - h, 0)
        pad_w = max((ow - 1) * stride + kw - wdt, 0)
    else:
        if h < kh or wdt < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wdt}")
        oh = (h - kh) // stride + 1
        ow = (wdt - kw) // stride + 1
        pad_h = pad_w = 0
    pt, pl = pad_h // 2, pad_w // 2
    pb, pr = pad_h - pt, pad_w - pl

    xb = x.data.reshape((-1, h, wdt, cin))
    xp = np.pad(xb, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    depthwise = groups == cin and cout == cin
    w_data = w.data

    def tap(arr, m, n):
        return arr[:, m : m + (oh - 1) * stride + 1 : stride,
                   n : n + (ow - 1) * stride + 1 : stride, :]

    out = np.zeros((xb.shape[0], oh, ow, cout), dtype=x.dtype)
    if depthwise:
        for m in range(kh):
            for n in range(kw):
                out += tap(xp, m, n) * w_data[m, n, 0]
    elif groups == 1:
        for m in range(kh):
            for n in range(kw):
                out += tap(xp, m, n) @ w_data[m, n]
    else:
        cig, cog = cin // groups, cout // groups
        for gi in range(groups):
            xs = xp[..., gi * cig : (gi + 1) * cig]
            acc = out[..., gi * cog : (gi + 1) * cog]
            for m in range(kh):
                for n in range(kw):
                    acc += tap(xs, m, n) @ w_data[m, n, :, gi * cog : (gi + 1) * cog]
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (oh, ow, cout))

    x_shape = x.shape
    has_bias = b is not None

    def backward(g):
        gb4 = g.reshape((-1, oh, ow, cout))
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w_data)
        if depthwise:
            for m in range(kh):
                for n in range(kw):
                    xs = tap(xp, m, n)
                    gw[m, n, 0] = (xs * gb4).sum(axis=(0, 1, 2))
                    tap(gxp, m, n)[...] += gb4 * w_data[m, n, 0]
        elif groups == 1:
            for m in range(kh):
                for n in range(kw):
                    xs = tap(xp, m, n)
                    gw[m, n] = np.tensordot(xs, gb4, axes=([0, 1, 2], [0, 1, 2]))
                    tap(gxp, m, n)[...] += gb4 @ w_data[m, n].T
        else:
            cig, cog = cin // groups, cout // groups
            for gi in range(groups):
                xs_g = xp[..., gi * cig : (gi + 1) * cig]
                gg = gb4[..., gi * cog : (gi + 1) * cog]
                gxs = gxp[..., gi * cig : (gi + 1) * cig]
                for m in range(kh):
                    for n in range(kw):
                        xs = tap(xs_g, m, n)
                        gw[m, n, :, gi * cog : (gi + 1) * cog] = np.tensordot(
                            xs, gg, axes=([0, 1, 2], [0, 1, 2])
                        )
                        tap(gxs, m, n)[...] += gg @ w_data[m, n, :, gi * cog : (gi + 1) * cog].T
        gx = gxp[:, pt : pt + h, pl : pl + wdt, :].reshape(x_shape)
        if has_bias:
            return gx, gw, gb4.sum(axis=(0, 1, 2))
        return gx, gw

    return _result("conv2d", out, operands, backward)
