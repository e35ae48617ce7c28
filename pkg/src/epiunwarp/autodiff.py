"""Reverse-mode automatic differentiation over dense real tensors.

The primitive set is exactly what the displacement-estimation graph needs:
convolutions, LeakyReLU, nearest upsampling, channel concatenation, the
differentiable phase-encode resampler, and scalar/elementwise arithmetic.
Operations executed while a Tape is active (and touching at least one
gradient-tracked tensor) append a record; ``backward`` replays the records
once in reverse order, accumulating gradients additively.

There is deliberately no broadcasting beyond tensor-vs-python-scalar, no
higher-order differentiation and no dynamic control-flow capture.
"""

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array node; float64 or float32 storage, float64 compute."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; scalar operands stay python floats.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul_scalar(self, 1.0 / other)

    def __neg__(self):
        return neg(self)


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered operation log for one forward pass (single execution stream)."""

    __slots__ = ("records",)

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.records)


def _f64(t: Tensor) -> np.ndarray:
    d = t.data
    return d if d.dtype == np.float64 else d.astype(np.float64)


def _make(data, inputs: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.records.append(_Record(op, tuple(inputs), out, backward))
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# --------------------------------------------------------------------------
# Arithmetic primitives
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(_f64(a) + _f64(b), (a, b), "add", lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(_f64(a) - _f64(b), (a, b), "sub", lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = _f64(a), _f64(b)
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    ad, bd = _f64(a), _f64(b)
    out = ad / bd
    return _make(out, (a, b), "div", lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return _make(-_f64(a), (a,), "neg", lambda g: (-g,))


def add_scalar(a: Tensor, c) -> Tensor:
    return _make(_f64(a) + float(c), (a,), "add_scalar", lambda g: (g,))


def mul_scalar(a: Tensor, c) -> Tensor:
    c = float(c)
    return _make(_f64(a) * c, (a,), "mul_scalar", lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = _f64(a)
    return _make(ad * ad, (a,), "square", lambda g: (2.0 * ad * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(_f64(a))
    return _make(out, (a,), "sqrt", lambda g: (0.5 * g / out,))


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    return _make(np.sum(_f64(a)), (a,), "sum",
                 lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    return _make(np.mean(_f64(a)), (a,), "mean",
                 lambda g: (np.full(shape, float(g) / n),))


def diff(a: Tensor, axis: int) -> Tensor:
    """Spatial forward difference; output extent N-1 along ``axis``."""
    ad = _f64(a)
    if ad.shape[axis] < 2:
        raise ShapeError(f"diff: axis {axis} has extent {ad.shape[axis]} < 2")
    out = np.diff(ad, axis=axis)

    def bwd(g):
        gx = np.zeros_like(ad)
        lo = [slice(None)] * ad.ndim
        hi = [slice(None)] * ad.ndim
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        gx[tuple(hi)] += g
        gx[tuple(lo)] -= g
        return (gx,)

    return _make(out, (a,), "diff", bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    return _make(_f64(a).reshape(shape), (a,), "reshape",
                 lambda g: (g.reshape(old),))


def _box_sum(arr: np.ndarray, window) -> np.ndarray:
    """Centered moving sum with zero padding, separable per axis."""
    out = arr
    for axis, w in enumerate(window):
        if w == 1:
            continue
        r = w // 2
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r + 1, r)
        c = np.cumsum(np.pad(out, pad), axis=axis)
        n = out.shape[axis]
        hi = np.take(c, np.arange(n) + 2 * r + 1, axis=axis)
        lo = np.take(c, np.arange(n), axis=axis)
        out = hi - lo
    return out


def window_sum(a: Tensor, window) -> Tensor:
    """Moving sum over a centered odd window, zero-padded at borders.

    The operator is symmetric, so the backward pass applies the same
    moving sum to the upstream gradient.
    """
    window = tuple(int(w) for w in window)
    if len(window) != a.data.ndim:
        raise ShapeError(f"window_sum: window rank {len(window)} != tensor rank {a.data.ndim}")
    if any(w < 1 or w % 2 == 0 for w in window):
        raise ShapeError(f"window_sum: window extents must be odd positive, got {window}")
    out = _box_sum(_f64(a), window)
    return _make(out, (a,), "window_sum", lambda g: (_box_sum(g, window),))


# --------------------------------------------------------------------------
# Network primitives
# --------------------------------------------------------------------------

def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu: slope must be in (0,1), got {slope}")
    ad = _f64(a)
    factor = np.where(ad >= 0.0, 1.0, slope)
    return _make(ad * factor, (a,), "leaky_relu", lambda g: (g * factor,))


def upsample_nearest(a: Tensor, factor) -> Tensor:
    """Replicate each voxel ``factor`` times along every spatial axis.

    ``a`` is channel-first (C, *spatial); ``factor`` is an int or a
    per-spatial-axis tuple.
    """
    n = a.data.ndim - 1
    if isinstance(factor, int):
        factors = (factor,) * n
    else:
        factors = tuple(int(f) for f in factor)
    if len(factors) != n or any(f < 1 for f in factors):
        raise ShapeError(f"upsample_nearest: bad factor {factor} for rank {n}")
    out = _f64(a)
    for axis, f in enumerate(factors, start=1):
        if f > 1:
            out = np.repeat(out, f, axis=axis)

    in_spatial = a.data.shape[1:]

    def bwd(g):
        # Sum over each replication block: fold every upsampled axis into
        # (extent, factor) and reduce the factor axes.
        shape = [g.shape[0]]
        reduce_axes = []
        for e, f in zip(in_spatial, factors):
            shape.append(e)
            if f > 1:
                reduce_axes.append(len(shape))
                shape.append(f)
        gr = g.reshape(shape)
        if reduce_axes:
            gr = gr.sum(axis=tuple(reduce_axes))
        return (gr,)

    return _make(out, (a,), "upsample_nearest", bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[1:] != b.data.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial mismatch {a.data.shape[1:]} vs {b.data.shape[1:]}")
    ca = a.data.shape[0]
    out = np.concatenate([_f64(a), _f64(b)], axis=0)
    return _make(out, (a, b), "concat_channels",
                 lambda g: (g[:ca], g[ca:]))


def conv_nd(x: Tensor, kernel: Tensor, bias: Tensor, stride=1) -> Tensor:
    """Channel-first n-D convolution, zero 'same' padding, then striding.

    x: (C_in, *spatial); kernel: (C_out, C_in, *k); bias: (C_out,).
    Kernel extents must be 3 and strides 1 or 2 per axis.
    """
    n = x.data.ndim - 1
    if n not in (2, 3):
        raise ShapeError(f"conv_nd: expected 2 or 3 spatial axes, got {n}")
    if kernel.data.ndim != n + 2:
        raise ShapeError(f"conv_nd: kernel rank {kernel.data.ndim} incompatible with input rank {x.data.ndim}")
    if kernel.data.shape[1] != x.data.shape[0]:
        raise ShapeError(
            f"conv_nd: kernel expects {kernel.data.shape[1]} input channels, input has {x.data.shape[0]}")
    ksize = kernel.data.shape[2:]
    if any(k != 3 for k in ksize):
        raise ShapeError(f"conv_nd: kernel extents must be 3, got {ksize}")
    strides = (stride,) * n if isinstance(stride, int) else tuple(stride)
    if len(strides) != n or any(s not in (1, 2) for s in strides):
        raise ShapeError(f"conv_nd: strides must be 1 or 2 per axis, got {strides}")
    for e, s in zip(x.data.shape[1:], strides):
        if e % s != 0:
            raise ShapeError(f"conv_nd: spatial extent {e} not divisible by stride {s}")
    if bias.data.shape != (kernel.data.shape[0],):
        raise ShapeError(f"conv_nd: bias shape {bias.data.shape} != ({kernel.data.shape[0]},)")

    xd = np.ascontiguousarray(_f64(x))
    kd = np.ascontiguousarray(_f64(kernel))
    out = kernels.conv_forward(xd, kd, strides)
    out += _f64(bias).reshape((-1,) + (1,) * n)

    spatial = xd.shape[1:]
    need_x = x.requires_grad
    need_k = kernel.requires_grad
    need_b = bias.requires_grad

    def bwd(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv_bwd_input(kd, g, spatial, strides) if need_x else None
        gk = kernels.conv_bwd_kernel(xd, g, ksize, strides) if need_k else None
        gb = g.sum(axis=tuple(range(1, n + 1))) if need_b else None
        return (gx, gk, gb)

    return _make(out, (x, kernel, bias), "conv_nd", bwd)


def linear_sample_pe(image: Tensor, displacement: Tensor, pe_axis: int = 0) -> Tensor:
    """Pull-warp along the phase-encode axis with linear interpolation.

    output(i, ...) samples the image at position i + displacement(i, ...)
    along ``pe_axis``; every other coordinate is unchanged.  Neighbours
    falling outside [0, N-1] contribute zero.  The derivative with respect
    to the displacement is the local slope of the interpolant (the cell to
    the right when the sample position is an integer).
    """
    _check_same_shape(image, displacement, "linear_sample_pe")
    if not 0 <= pe_axis < image.data.ndim:
        raise ShapeError(f"linear_sample_pe: pe_axis {pe_axis} invalid for rank {image.data.ndim}")

    img = np.moveaxis(_f64(image), pe_axis, 0)
    disp = np.moveaxis(_f64(displacement), pe_axis, 0)
    n = img.shape[0]
    idx = np.arange(n, dtype=np.float64).reshape((n,) + (1,) * (img.ndim - 1))
    pos = idx + disp
    i0 = np.floor(pos)
    w = pos - i0
    i0 = i0.astype(np.int64)
    i1 = i0 + 1
    in0 = (i0 >= 0) & (i0 < n)
    in1 = (i1 >= 0) & (i1 < n)
    i0c = np.clip(i0, 0, n - 1)
    i1c = np.clip(i1, 0, n - 1)
    v0 = np.take_along_axis(img, i0c, axis=0) * in0
    v1 = np.take_along_axis(img, i1c, axis=0) * in1
    out = np.moveaxis((1.0 - w) * v0 + w * v1, 0, pe_axis)

    need_img = image.requires_grad
    need_disp = displacement.requires_grad

    def bwd(g):
        gm = np.moveaxis(g, pe_axis, 0)
        gi = None
        if need_img:
            flat_cols = int(np.prod(img.shape[1:], dtype=np.int64)) if img.ndim > 1 else 1
            gi2 = np.zeros((n, flat_cols))
            rows0 = i0c.reshape(n, flat_cols)
            rows1 = i1c.reshape(n, flat_cols)
            cols = np.broadcast_to(np.arange(flat_cols), (n, flat_cols))
            np.add.at(gi2, (rows0, cols), (gm * (1.0 - w) * in0).reshape(n, flat_cols))
            np.add.at(gi2, (rows1, cols), (gm * w * in1).reshape(n, flat_cols))
            gi = np.moveaxis(gi2.reshape(img.shape), 0, pe_axis)
        gd = None
        if need_disp:
            gd = np.moveaxis((v1 - v0) * gm, 0, pe_axis)
        return (gi, gd)

    return _make(out, (image, displacement), "linear_sample_pe", bwd)


# --------------------------------------------------------------------------
# Backward pass and gradient checking
# --------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor):
    """Propagate d(loss)/d(node) through the tape; accumulate into leaf .grad."""
    if loss.data.shape != ():
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.array(1.0)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        holders.pop(id(rec.output), None)
        if g is None:
            continue
        input_grads = rec.backward(g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    # Whatever remains never appeared as an output on this tape: the leaves.
    for key, g in grads.items():
        t = holders[key]
        t.grad = g if t.grad is None else t.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued.  The numeric probe never touches the tape,
    so it stays independent of the analytic path it checks.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    x.grad = None
    prev = x.requires_grad
    x.requires_grad = True
    try:
        with Tape() as tape:
            y = f(x)
        if y.data.shape != ():
            raise ContractError("grad_check: f must be scalar-valued")
        backward(tape, y)
        analytic = np.zeros(x.data.shape) if x.grad is None else np.asarray(x.grad, dtype=np.float64)
    finally:
        x.requires_grad = prev

    numeric = np.zeros_like(analytic)
    for idx in np.ndindex(x.data.shape):
        orig = x.data[idx]
        x.data[idx] = orig + step
        fp = float(f(x).data)
        x.data[idx] = orig - step
        fm = float(f(x).data)
        x.data[idx] = orig
        numeric[idx] = (fp - fm) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
