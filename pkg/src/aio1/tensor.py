"""Dense tensors with reverse-mode automatic differentiation.

A tensor wraps one contiguous numpy array (row-major, float32 by default,
float64 for verification paths) plus the bookkeeping needed for
backpropagation. Every operation is a pure function: inputs are never
mutated and identical inputs produce bit-identical outputs. Operations
raise :class:`NumericError` as soon as they produce a NaN or Inf, so a
diverging computation fails at the op that broke, not three modules later.

The set of primitives is deliberately small: matrix multiply, 2-D
cross-correlation, max pooling, layer normalisation, a handful of
activations, gather/reshape plumbing, and the losses. Gradients of every
primitive are validated against central finite differences by
:func:`grad_check`, which doubles as the verification oracle for the
model built on top.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf as _erf

from .errors import DimensionError, NumericError, ParameterError

FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor:
    """A numpy-backed array node in a reverse-mode autodiff graph.

    ``data`` is held by reference; callers must not mutate arrays they
    hand in (the one sanctioned exception is the in-place perturbation
    done by :func:`grad_check`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None], op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic protocol --------------------------------------------------------

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- backprop ---------------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        """Accumulate a gradient buffer the calling backward closure created
        (or received as the finished gradient of its output node) exclusively
        for this tensor; adopted without a defensive copy when possible.
        Callers must never hand the same buffer to two parents this way."""
        if (self.grad is None and g.dtype == self.data.dtype
                and g.flags.c_contiguous):
            self.grad = g
        else:
            self._accumulate(g)

    def backward(self, gradient: np.ndarray | None = None) -> None:
        """Backpropagate from this node through the recorded graph."""
        if not self.requires_grad:
            raise ParameterError("backward() on a tensor that requires no grad")
        if gradient is None:
            if self.size != 1:
                raise ParameterError("backward() without gradient needs a scalar")
            gradient = np.ones_like(self.data)
        # Iterative topological order; graphs are shallow but wide.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(gradient, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return divide(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


class Parameter:
    """A named, trainable tensor.

    The gradient lives on the wrapped tensor and always has the same
    shape; names are dotted paths unique within one weight collection.
    """

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, tensor: Tensor):
        tensor.requires_grad = True
        self.name = name
        self.tensor = tensor

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        if self.tensor.grad is None:
            return np.zeros_like(self.tensor.data)
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def check_unique_names(params: Iterable[Parameter]) -> None:
    seen: set[str] = set()
    for p in params:
        if p.name in seen:
            raise ParameterError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise DimensionError(
            f"{op}: mixed dtypes {a.data.dtype.name} vs {b.data.dtype.name}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _require_same_dtype(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    _require_same_dtype(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(g * a.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "mul")


def divide(a: Tensor, b: Tensor) -> Tensor:
    _require_same_dtype(a, b, "divide")
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate_owned(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate_owned(_unbroadcast(-g * out_data / b.data, b.data.shape))

    return Tensor._from_op(out_data, (a, b), backward, "divide")


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def backward(g):
        a._accumulate_owned(g * out_data)

    return Tensor._from_op(out_data, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)

    def backward(g):
        a._accumulate_owned(g / a.data)

    return Tensor._from_op(out_data, (a,), backward, "log")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate_owned(np.ascontiguousarray(g).reshape(a.data.shape))

    return Tensor._from_op(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def backward(g):
        a._accumulate_owned(np.ascontiguousarray(np.transpose(g, inv)))

    return Tensor._from_op(out_data, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ParameterError("concat of zero tensors")
    for t in tensors[1:]:
        _require_same_dtype(tensors[0], t, "concat")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; duplicates allowed.

    The backward pass scatter-adds into the source, so the same row may
    appear in many windows (the attention gather relies on this).
    """
    idx = np.asarray(indices)
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        # bring the gathered axes to the front, flatten everything else
        gm = np.ascontiguousarray(np.moveaxis(
            g, tuple(range(axis, axis + idx.ndim)), tuple(range(idx.ndim))))
        flat_idx = idx.reshape(-1)
        gf = gm.reshape(flat_idx.size, -1)
        n = a.data.shape[axis]
        acc = np.zeros((n, gf.shape[1]), dtype=g.dtype)
        if gf.shape[1] <= 64:
            # column-wise bincount beats np.add.at for narrow feature dims
            for c in range(gf.shape[1]):
                acc[:, c] = np.bincount(flat_idx, weights=gf[:, c], minlength=n)
        else:
            np.add.at(acc, flat_idx, gf)
        moved = (n,) + a.data.shape[:axis] + a.data.shape[axis + 1:]
        dx = acc.reshape(moved)
        if axis:
            dx = np.ascontiguousarray(np.moveaxis(dx, 0, axis))
        a._accumulate_owned(dx)

    return Tensor._from_op(out_data, (a,), backward, "take")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())
            return
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        a._accumulate_owned(np.broadcast_to(g, a.data.shape).copy())

    return Tensor._from_op(np.asarray(out_data), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    _require_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 axes")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate_owned(np.ascontiguousarray(_unbroadcast(ga, a.data.shape)))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate_owned(np.ascontiguousarray(_unbroadcast(gb, b.data.shape)))

    return Tensor._from_op(out_data, (a, b), backward, "matmul")


def conv2d(x: Tensor, kernels: Tensor, padding: tuple[int, int] = (0, 0)) -> Tensor:
    """2-D cross-correlation (no kernel flip).

    ``x`` is ``[cin, h, w]`` or ``[n, cin, h, w]``; ``kernels`` is
    ``[cout, cin, kh, kw]``. Output height is ``h + 2*pad_h - kh + 1``
    and similarly for width.
    """
    _require_same_dtype(x, kernels, "conv2d")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise DimensionError("conv2d expects [n?,cin,h,w] input and [cout,cin,kh,kw] kernels")
    n, cin, h, w = xd.shape
    cout, kcin, kh, kw = kernels.data.shape
    if kcin != cin:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, kernels {kcin}")
    ph, pw = padding
    if ph < 0 or pw < 0:
        raise ParameterError("conv2d padding must be non-negative")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError("conv2d kernel larger than padded input")

    oh = h + 2 * ph - kh + 1
    ow = w + 2 * pw - kw + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # im2col + GEMM: the copy costs less than a strided contraction
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * oh * ow, cin * kh * kw)
    kmat = kernels.data.reshape(cout, cin * kh * kw)
    out_data = (cols @ kmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out_data)

    def backward(g):
        gd = g[None] if squeeze else g
        gcols = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if kernels.requires_grad:
            dk = (gcols.T @ cols).reshape(cout, cin, kh, kw)
            kernels._accumulate_owned(dk)
        if x.requires_grad:
            # full correlation of the padded output gradient with the
            # spatially flipped kernels recovers the input gradient
            gp = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
            gw = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5))
            gw = gw.reshape(n * (h + 2 * ph) * (w + 2 * pw), cout * kh * kw)
            kflip = kernels.data[:, :, ::-1, ::-1]
            kf = np.ascontiguousarray(kflip.transpose(0, 2, 3, 1)).reshape(
                cout * kh * kw, cin)
            dxp = (gw @ kf).reshape(n, h + 2 * ph, w + 2 * pw, cin)
            dxp = dxp.transpose(0, 3, 1, 2)
            dx = np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w])
            x._accumulate_owned(dx[0] if squeeze else dx)

    out = out_data[0] if squeeze else out_data
    return Tensor._from_op(out, (x, kernels), backward, "conv2d")


def maxpool(x: Tensor, axis: int, width: int) -> Tensor:
    """Non-overlapping max over ``width`` along ``axis``.

    A trailing remainder is padded by repeating the last element, so no
    frames are dropped. Gradient routes to the first maximal index of
    each window.
    """
    if width < 1:
        raise ParameterError("maxpool width must be >= 1")
    xd = np.moveaxis(x.data, axis, -1)
    length = xd.shape[-1]
    pad = (-length) % width
    if pad:
        xd = np.concatenate([xd, np.repeat(xd[..., -1:], pad, axis=-1)], axis=-1)
    nwin = xd.shape[-1] // width
    windows = xd.reshape(xd.shape[:-1] + (nwin, width))
    arg = windows.argmax(axis=-1)  # first max on ties
    out_m = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    out_data = np.moveaxis(out_m, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        buf = np.zeros(xd.shape[:-1] + (nwin, width), dtype=g.dtype)
        np.put_along_axis(buf, arg[..., None], gm[..., None], axis=-1)
        buf = buf.reshape(xd.shape)
        if pad:
            # padded copies never win ties (the original comes first), so
            # this fold-back only matters defensively
            main = buf[..., :length].copy()
            main[..., -1] += buf[..., length:].sum(axis=-1)
        else:
            main = buf
        x._accumulate_owned(np.ascontiguousarray(np.moveaxis(main, -1, axis)))

    return Tensor._from_op(out_data, (x,), backward, "maxpool")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if c < 1:
        raise DimensionError("layer_norm needs at least one feature")
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    if gain.data.shape != (c,) or bias.data.shape != (c,):
        raise DimensionError("layer_norm gain/bias must match the last axis")
    _require_same_dtype(x, gain, "layer_norm")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if bias.requires_grad:
            bias._accumulate_owned(np.ascontiguousarray(g).reshape(-1, c).sum(axis=0))
        if gain.requires_grad:
            gain._accumulate_owned((g * xhat).reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gy = g * gain.data
            m1 = gy.mean(axis=-1, keepdims=True)
            m2 = (gy * xhat).mean(axis=-1, keepdims=True)
            x._accumulate_owned((gy - m1 - xhat * m2) * inv)

    return Tensor._from_op(out_data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def elu(x: Tensor) -> Tensor:
    pos = x.data > 0
    out_data = np.where(pos, x.data, np.expm1(np.minimum(x.data, 0.0)))

    def backward(g):
        # elu'(x) = 1 for x > 0, elu(x) + 1 otherwise
        x._accumulate_owned(g * np.where(pos, x.data.dtype.type(1.0),
                                         out_data + x.data.dtype.type(1.0)))

    return Tensor._from_op(out_data, (x,), backward, "elu")


def gelu(x: Tensor) -> Tensor:
    # exact erf form; the tanh approximation is too loose for grad checks
    inv_sqrt2 = np.asarray(1.0 / math.sqrt(2.0), dtype=x.data.dtype)
    phi = 0.5 * (1.0 + _erf(x.data * inv_sqrt2))
    out_data = x.data * phi

    def backward(g):
        dens = np.exp(-0.5 * x.data * x.data) / np.asarray(
            math.sqrt(2.0 * math.pi), dtype=x.data.dtype)
        x._accumulate_owned(g * (phi + x.data * dens))

    return Tensor._from_op(out_data, (x,), backward, "gelu")


def sigmoid(x: Tensor) -> Tensor:
    out_data = _sigmoid_np(x.data)

    def backward(g):
        x._accumulate_owned(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (x,), backward, "sigmoid")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return masked_softmax(x, None, axis)


def masked_softmax(x: Tensor, mask: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get weight 0.

    Every softmax row must keep at least one unmasked entry.
    """
    z = x.data
    if mask is not None:
        if not np.broadcast_shapes(mask.shape, z.shape) == z.shape:
            raise DimensionError("mask does not broadcast to the logits")
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    if not np.isfinite(zmax).all():
        raise NumericError("softmax row with no unmasked entries")
    e = np.exp(z - zmax)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x._accumulate_owned(out_data * (g - dot))

    return Tensor._from_op(out_data, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    zmax = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - zmax
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    sm = np.exp(out_data)

    def backward(g):
        x._accumulate_owned(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out_data, (x,), backward, "log_softmax")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy on logits; targets may be soft."""
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    out_data = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        logits._accumulate_owned(g * (_sigmoid_np(z) - t))

    return Tensor._from_op(out_data, (logits,), backward, "bce_with_logits")


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter | Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds a scalar loss from the current parameter values; it is
    re-evaluated twice per parameter entry. All parameters must be held in
    float64 — float32 round-off swamps the finite-difference signal.
    """
    tensors = [p.tensor if isinstance(p, Parameter) else p for p in params]
    for t in tensors:
        if t.data.dtype != np.float64:
            raise ParameterError("grad_check requires float64 parameters")
        t.requires_grad = True
        t.grad = None
    out = fn()
    if out.size != 1:
        raise ParameterError("grad_check needs a scalar function")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value")
    if out.requires_grad:
        out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in tensors]

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn().data)
            flat[i] = orig - eps
            lo = float(fn().data)
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NumericError("grad_check: non-finite perturbed value")
            num = (hi - lo) / (2.0 * eps)
            denom = max(1e-8, abs(ana_flat[i]) + abs(num))
            worst = max(worst, abs(ana_flat[i] - num) / denom)
    return worst


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit rng")
    keep = (rng.random(x.data.shape, dtype=np.float32) >= rate).astype(x.data.dtype)
    keep /= np.asarray(1.0 - rate, dtype=x.data.dtype)
    return mul(x, Tensor(keep))
