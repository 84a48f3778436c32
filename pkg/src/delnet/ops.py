"""Differentiable kernels over :class:`~delnet.tensor.Tensor`.

Every function is pure: it never writes into its inputs and returns a new
tensor. When a :class:`~delnet.tensor.Tape` is active and an input requires a
gradient, the op records a closure computing its vector-Jacobian product.

Kernels also report their multiply-accumulate cost to any active
:func:`count_macs` context: convolutions at ``N*Cout*H'*W'*Cin*k*k``,
arithmetic elementwise ops, activations and pools at one per output element,
pure data movement (concat, nearest upsampling) at zero.
"""

from __future__ import annotations

import contextlib
from collections import Counter
from typing import Iterator, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, tracking


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_op: Counter[str] = Counter()

    def add(self, op: str, n: int) -> None:
        self.total += int(n)
        self.by_op[op] += int(n)


_counters: list[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count the MACs executed by kernels inside the block."""
    counter = MacCounter()
    _counters.append(counter)
    try:
        yield counter
    finally:
        _counters.remove(counter)


def _tally(op: str, n: int) -> None:
    for c in _counters:
        c.add(op, n)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = tracking(*inputs)
    out = Tensor(data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected [N,C,H,W] input, got {x.shape}", x.shape)


# -- broadcasting elementwise arithmetic -------------------------------------


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return sa
    # scalar-like operands (size 1) broadcast against anything
    if a.size == 1 and a.ndim <= 1:
        return sb
    if b.size == 1 and b.ndim <= 1:
        return sa
    if len(sa) != len(sb):
        raise ShapeError(f"{op}: rank mismatch {sa} vs {sb}", sa, sb)
    out = []
    for da, db in zip(sa, sb):
        if da == db or db == 1:
            out.append(da)
        elif da == 1:
            out.append(db)
        else:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}", sa, sb)
    return tuple(out)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) != g.ndim:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = _as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, like=a)
    return a, b


def _data(t: Tensor, shape) -> np.ndarray:
    # size-1 operands of lower rank are broadcast as plain scalars
    if t.size == 1 and t.ndim <= 1 and len(shape) != t.ndim:
        return t.data.reshape(())
    return t.data


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _broadcast_shape(a, b, "add")
    out = _data(a, shape) + _data(b, shape)
    _tally("add", out.size)
    return _emit("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _broadcast_shape(a, b, "sub")
    out = _data(a, shape) - _data(b, shape)
    _tally("sub", out.size)
    return _emit("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _broadcast_shape(a, b, "mul")
    ad, bd = _data(a, shape), _data(b, shape)
    out = ad * bd
    _tally("mul", out.size)
    return _emit("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    shape = _broadcast_shape(a, b, "div")
    ad, bd = _data(a, shape), _data(b, shape)
    out = ad / bd
    _tally("div", out.size)

    def backward(g):
        return (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape))

    return _emit("div", out, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return _emit("neg", -x.data, (x,), lambda g: (-g,))


# -- unary maps ---------------------------------------------------------------


def power(x: Tensor, exponent: float) -> Tensor:
    """``x ** exponent``; for exponents below 1 the derivative at 0 is taken as 0."""
    p = float(exponent)
    out = np.power(x.data, p)
    _tally("pow", out.size)

    def backward(g):
        if p < 1.0:
            safe = np.where(x.data == 0, 1, x.data)
            return (np.where(x.data == 0, 0, g * p * np.power(safe, p - 1.0)).astype(g.dtype),)
        return (g * p * np.power(x.data, p - 1.0),)

    return _emit("pow", out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)
    _tally("log", out.size)
    return _emit("log", out, (x,), lambda g: (g / x.data,))


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)
    _tally("abs", out.size)
    return _emit("abs", out, (x,), lambda g: (g * np.sign(x.data),))


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise ``max(x, floor)``; ties send the gradient to ``x``."""
    keep = x.data >= floor
    out = np.where(keep, x.data, x.data.dtype.type(floor))
    _tally("maximum", out.size)
    return _emit("maximum", out, (x,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


def clamp(x: Tensor, lo: float = 0.0, hi: float = 1.0) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi)
    _tally("clamp", out.size)
    return _emit("clamp", out, (x,), lambda g: (np.where(inside, g, 0).astype(g.dtype),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    _tally("relu", out.size)
    return _emit("relu", out, (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype),))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, stable for arbitrarily large ``|x|``."""
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    _tally("sigmoid", out.size)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def prelu(x: Tensor, slope) -> Tensor:
    """Parametric ReLU with one learnable slope per channel, or a shared one."""
    slope = _as_tensor(slope, like=x)
    if slope.size == 1:
        a = slope.data.reshape(())
        reduce_axes = None
    else:
        _require_4d(x, "prelu")
        if slope.shape != (x.shape[1],):
            raise ShapeError(f"prelu: slope shape {slope.shape} does not match channels of {x.shape}",
                             slope.shape, x.shape)
        a = slope.data.reshape(1, -1, 1, 1)
        reduce_axes = (0, 2, 3)
    xd = x.data
    pos = xd >= 0
    out = np.where(pos, xd, a * xd)
    _tally("prelu", out.size)

    def backward(g):
        gx = np.where(pos, g, a * g)
        neg_part = np.where(pos, 0, g * xd)
        if reduce_axes is None:
            ga = np.asarray(neg_part.sum(), dtype=slope.dtype).reshape(slope.shape)
        else:
            ga = neg_part.sum(axis=reduce_axes)
        return gx, ga

    return _emit("prelu", out, (x, slope), backward)


# -- reductions and pooling ------------------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape
    axes = range(x.ndim) if axis is None else [a % x.ndim for a in np.atleast_1d(axis)]
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))
    _tally("sum", np.size(out))
    return _emit("sum", np.asarray(out, dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(n))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over each H*W plane: ``[N,C,H,W] -> [N,C,1,1]``."""
    _require_4d(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    _tally("global_avg_pool", out.size)
    scale = 1.0 / (h * w)
    return _emit("global_avg_pool", out, (x,),
                 lambda g: (np.broadcast_to(g * scale, x.shape).astype(g.dtype),))


def channel_pool(x: Tensor, mode: str) -> Tensor:
    """Per-pixel mean or max across channels: ``[N,C,H,W] -> [N,1,H,W]``.

    For ``max``, ties send the whole gradient to the lowest channel index.
    """
    _require_4d(x, "channel_pool")
    c = x.shape[1]
    if mode == "mean":
        out = x.data.mean(axis=1, keepdims=True)
        _tally("channel_pool", out.size)
        return _emit("channel_pool_mean", out, (x,),
                     lambda g: (np.broadcast_to(g / c, x.shape).astype(g.dtype),))
    if mode == "max":
        idx = np.argmax(x.data, axis=1)[:, None]
        out = np.take_along_axis(x.data, idx, axis=1)
        _tally("channel_pool", out.size)

        def backward(g):
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, idx, g, axis=1)
            return (gx,)

        return _emit("channel_pool_max", out, (x,), backward)
    raise ValueError(f"channel_pool mode must be 'mean' or 'max', got {mode!r}")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; a trailing odd row/column is dropped."""
    _require_4d(x, "avg_pool2")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2: input {x.shape} too small", x.shape)
    crop = x.data[:, :, : 2 * ho, : 2 * wo]
    out = crop.reshape(n, c, ho, 2, wo, 2).mean(axis=(3, 5))
    _tally("avg_pool2", out.size)

    def backward(g):
        gx = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        gx[:, :, : 2 * ho, : 2 * wo] = up
        return (gx,)

    return _emit("avg_pool2", out, (x,), backward)


# -- layout ---------------------------------------------------------------------


def concat_channels(*tensors: Tensor) -> Tensor:
    """Stack along the channel axis in argument order."""
    if not tensors:
        raise ShapeError("concat_channels: nothing to concatenate")
    for t in tensors:
        _require_4d(t, "concat_channels")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: non-channel extents differ {ref} vs {t.shape}",
                             ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def backward(g):
        return tuple(g[:, bounds[i]: bounds[i + 1]] for i in range(len(tensors)))

    return _emit("concat_channels", out, tensors, backward)


def upsample_nearest(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling: ``[N,C,H,W] -> [N,C,2H,2W]``."""
    _require_4d(x, "upsample_nearest")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _emit("upsample_nearest", out, (x,),
                 lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# -- convolution ------------------------------------------------------------------


def conv_output_extent(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def same_padding(k: int, dilation: int = 1) -> int:
    return dilation * (k - 1) // 2


def _tap_slice(start: int, count: int, stride: int) -> slice:
    return slice(start, start + stride * (count - 1) + 1, stride)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``[N,Cin,H,W]`` and ``weight`` is ``[Cout,Cin,kh,kw]``. Lowered to
    one GEMM per batch via an explicit column buffer.
    """
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be [Cout,Cin,kh,kw], got {weight.shape}", weight.shape)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input {x.shape} has {cin} channels but weight {weight.shape} "
                         f"expects {wcin}", x.shape, weight.shape)
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}",
                         bias.shape, weight.shape)
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} padding={padding} dilation={dilation}")
    ho = conv_output_extent(h, kh, stride, padding, dilation)
    wo = conv_output_extent(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {weight.shape} "
                         f"(stride {stride}, padding {padding}, dilation {dilation})",
                         x.shape, weight.shape)

    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=np.result_type(x.dtype, weight.dtype))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, _tap_slice(i * dilation, ho, stride),
                                  _tap_slice(j * dilation, wo, stride)]
    cols = cols.reshape(n, cin * kh * kw, ho * wo)
    wmat = weight.data.reshape(cout, -1)
    out = np.matmul(wmat, cols).reshape(n, cout, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)
    _tally("conv2d", n * cout * ho * wo * cin * kh * kw)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g3 = g.reshape(n, cout, ho * wo)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g3).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, _tap_slice(i * dilation, ho, stride),
                        _tap_slice(j * dilation, wo, stride)] += gcols[:, :, i, j]
            gx = gxp[:, :, p: p + h, p: p + w] if p else gxp
        gw = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _emit("conv2d", out, inputs, backward)


def downsample(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Halve the spatial extents with a stride-2 same-padded convolution."""
    _require_4d(x, "downsample")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample: spatial extents must be even, got {x.shape}", x.shape)
    k = weight.shape[-1]
    return conv2d(x, weight, bias, stride=2, padding=same_padding(k))


def upsample(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Double the spatial extents: nearest-neighbour x2 then a same-padded convolution."""
    k = weight.shape[-1]
    return conv2d(upsample_nearest(x), weight, bias, stride=1, padding=same_padding(k))
