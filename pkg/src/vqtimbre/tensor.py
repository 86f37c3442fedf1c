"""Small tape-based reverse-mode autodiff engine on top of numpy.

Only the operations the timbre model needs are provided. Every op records its
parents and a closure computing input gradients; :meth:`Tensor.backward`
replays the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or (data.dtype if isinstance(data, np.ndarray)
                                               and data.dtype in (np.float32, np.float64)
                                               else DEFAULT_DTYPE))
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph ---------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def topological_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children order of every node reachable from ``root``.

    Iterative DFS; recursion would overflow on long recurrent graphs.
    """
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


make_op = _make


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def reciprocal(x) -> Tensor:
    x = as_tensor(x)
    out = 1.0 / x.data
    return _make(out, (x,), lambda g: (-g * out * out,), "reciprocal")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def log1p(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _make(np.log1p(xd), (x,), lambda g: (g / (1.0 + xd),), "log1p")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    out = np.logaddexp(0.0, xd)
    return _make(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)
    return _make(out, (x,), lambda g: (np.where(mask, g, slope * g),), "leaky_relu")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def stop_gradient(x) -> Tensor:
    """Pass the value through; contribute no gradient to ``x``."""
    x = as_tensor(x)
    return Tensor(x.data)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # numerically stable for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions -------------------------------------------------------------

def tsum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis) * (1.0 / count)


def l1_norm(x) -> Tensor:
    return tsum(tabs(x))


def l2_norm(x) -> Tensor:
    return sqrt(tsum(square(x)))


def squared_l2(x) -> Tensor:
    return tsum(square(x))


# -- shape ops --------------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {orig} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(orig),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.asarray(x.data[idx]), (x,), backward, "index")


def take_rows(table, indices: np.ndarray) -> Tensor:
    """Row gather ``table[indices]`` with scatter-add backward."""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    shape = table.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, indices.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(table.data[indices], (table,), backward, "take_rows")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _make(data, tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0] or b.ndim != 2:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    parents: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        grads = [g @ wd, g2.T @ xd.reshape(-1, xd.shape[-1])]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out, parents, backward, "linear")


# -- framing / convolution ---------------------------------------------------------

def frame_signal(x, length: int, stride: int) -> Tensor:
    """Strided windows over the last axis: [..., T] -> [..., F, length]."""
    x = as_tensor(x)
    total = x.shape[-1]
    if total < length:
        raise DimensionError(f"frame_signal: signal of {total} samples shorter than window {length}")
    nframes = (total - length) // stride + 1
    view = np.lib.stride_tricks.sliding_window_view(x.data, length, axis=-1)[..., ::stride, :]
    data = np.ascontiguousarray(view[..., :nframes, :])
    lead = x.shape[:-1]

    def backward(g):
        return (overlap_add_array(g, stride, total).reshape(lead + (total,)),)

    return _make(data, (x,), backward, "frame")


def overlap_add_array(frames: np.ndarray, stride: int, total: int | None = None) -> np.ndarray:
    """Sum [..., F, length] frames hopped by ``stride`` into [..., total]."""
    nframes, length = frames.shape[-2], frames.shape[-1]
    out_len = (nframes - 1) * stride + length
    total = out_len if total is None else total
    lead = frames.shape[:-2]
    out = np.zeros(lead + (max(total, out_len),), dtype=frames.dtype)
    if length % stride:
        # zero-pad frames to a whole number of hops so the chunked path applies
        extra = stride - length % stride
        frames = np.concatenate([frames, np.zeros(lead + (nframes, extra), dtype=frames.dtype)], axis=-1)
        length += extra
        out = np.zeros(lead + (max(total, (nframes - 1) * stride + length),), dtype=frames.dtype)
    # split each frame into stride-sized chunks and add chunk columns at once
    hops = length // stride
    chunks = frames.reshape(lead + (nframes, hops, stride))
    for j in range(hops):
        seg = out[..., j * stride:j * stride + nframes * stride]
        seg += chunks[..., :, j, :].reshape(lead + (nframes * stride,))
    return out[..., :total]


def overlap_add(frames, stride: int, total: int | None = None) -> Tensor:
    frames = as_tensor(frames)
    nframes, length = frames.shape[-2], frames.shape[-1]

    def backward(g):
        padded = g
        need = (nframes - 1) * stride + length
        if g.shape[-1] < need:
            pad = [(0, 0)] * (g.ndim - 1) + [(0, need - g.shape[-1])]
            padded = np.pad(g, pad)
        view = np.lib.stride_tricks.sliding_window_view(padded, length, axis=-1)[..., ::stride, :]
        return (np.ascontiguousarray(view[..., :nframes, :]),)

    return _make(overlap_add_array(frames.data, stride, total), (frames,), backward, "overlap_add")


def conv1d(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Cross-correlation of [C_in, T] (or [B, C_in, T]) with [C_out, C_in, k] kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2] != kernels.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    if x.ndim == 2:
        out = conv1d_nlc(transpose(x, (1, 0)).reshape(1, x.shape[1], x.shape[0]), kernels, stride, padding, bias)
        return transpose(out.reshape(out.shape[1], out.shape[2]), (1, 0))
    return transpose(conv1d_nlc(transpose(x, (0, 2, 1)), kernels, stride, padding, bias), (0, 2, 1))


def conv1d_nlc(x, kernels, stride: int = 1, padding: int = 0, bias=None) -> Tensor:
    """Channels-last convolution: x [B, T, C_in] -> [B, T_out, C_out], one graph node.

    Kernels keep the [C_out, C_in, k] layout of :func:`conv1d`.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim != 3 or x.shape[2] != kernels.shape[1]:
        raise DimensionError(f"conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    c_out, c_in, k = kernels.shape
    bsz, t_in, _ = x.shape
    if k < 1 or stride < 1:
        raise DimensionError(f"conv1d: kernel size {k} and stride {stride} must be >= 1")
    if t_in + 2 * padding < k:
        raise DimensionError(f"conv1d: input length {t_in} + 2*{padding} shorter than kernel {k}")
    t_out = (t_in + 2 * padding - k) // stride + 1
    # Polyphase layout: with taps grouped in blocks of `stride`, row m of the
    # view xv holds input samples [m*stride, (m+1)*stride).  Flattening the
    # batch into the row axis turns every tap group into one contiguous-slice
    # matmul; rows that straddle two batch items are computed and discarded.
    groups = -(-k // stride)
    rows = t_out - 1 + groups
    right = rows * stride - t_in - padding
    xp = x.data
    if padding or right:
        xp = np.pad(xp, ((0, 0), (padding, max(right, 0)), (0, 0)))
    if right < 0:
        xp = xp[:, :rows * stride]
    xf = np.ascontiguousarray(xp).reshape(bsz * rows, stride * c_in)
    wpad = np.zeros((groups * stride, c_in, c_out), dtype=np.result_type(x.data, kernels.data))
    wpad[:k] = kernels.data.transpose(2, 1, 0)
    wg = wpad.reshape(groups, stride * c_in, c_out)
    span = bsz * rows - (groups - 1)
    acc = xf[:span] @ wg[0]
    for i in range(1, groups):
        acc += xf[i:i + span] @ wg[i]
    out = np.empty((bsz * rows, c_out), dtype=acc.dtype)
    out[:span] = acc
    out = out.reshape(bsz, rows, c_out)[:, :t_out]
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents = (x, kernels, bias)
    else:
        out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((bsz, rows, c_out), dtype=g.dtype)
        gfull[:, :t_out] = g
        gfull = gfull.reshape(bsz * rows, c_out)[:span]
        grads: list[np.ndarray | None] = [None]
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for i in range(groups):
                gxf[i:i + span] += gfull @ wg[i].T
            full = gxf.reshape(bsz, rows * stride, c_in)
            gx = np.zeros((bsz, t_in, c_in), dtype=g.dtype)
            n = min(t_in, rows * stride - padding)
            gx[:, :n] = full[:, padding:padding + n]
            grads[0] = gx
        gw = np.empty_like(wg)
        for i in range(groups):
            gw[i] = xf[i:i + span].T @ gfull
        grads.append(gw.reshape(groups * stride, c_in, c_out)[:k].transpose(2, 1, 0))
        if bias is not None:
            grads.append(g.reshape(-1, c_out).sum(axis=0))
        return grads

    return _make(out, parents, backward, "conv1d")


def transposed_conv1d(x, kernels, stride: int = 1) -> Tensor:
    """Adjoint of :func:`conv1d` (no padding) for kernels [C_in, C_out, k].

    [C_in, T] -> [C_out, (T-1)*stride + k]; a leading batch axis is allowed.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.ndim != 3 or x.ndim not in (2, 3) or x.shape[-2] != kernels.shape[0]:
        raise DimensionError(f"transposed_conv1d: input {x.shape} incompatible with kernels {kernels.shape}")
    if stride < 1:
        raise DimensionError(f"transposed_conv1d: stride {stride} must be >= 1")
    c_in, c_out, k = kernels.shape
    # [..., T, C_in] @ [C_in, C_out*k] -> frames [..., C_out, T, k]
    xt = transpose(x, (1, 0) if x.ndim == 2 else (0, 2, 1))
    frames = matmul(xt, kernels.reshape(c_in, c_out * k))
    if x.ndim == 2:
        t = x.shape[1]
        frames = transpose(frames.reshape(t, c_out, k), (1, 0, 2))
    else:
        b, _, t = x.shape
        frames = transpose(frames.reshape(b, t, c_out, k), (0, 2, 1, 3))
    return overlap_add(frames, stride)


def pad_last(x, left: int, right: int) -> Tensor:
    x = as_tensor(x)
    pad = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    n = x.shape[-1]
    return _make(np.pad(x.data, pad), (x,), lambda g: (g[..., left:left + n],), "pad")


# -- spectral magnitude ----------------------------------------------------------

def stft_magnitude(x, window: np.ndarray, hop: int, eps: float = 1e-10) -> Tensor:
    """|rfft(window * frame)| over the last axis: [..., T] -> [..., F, n//2+1].

    ``eps`` under the square root keeps the gradient finite at zero magnitude.
    """
    x = as_tensor(x)
    n = window.shape[0]
    frames = frame_signal(x, n, hop)
    fd = frames.data * window
    spec = np.fft.rfft(fd, axis=-1)
    mag = np.sqrt(spec.real ** 2 + spec.imag ** 2 + eps)
    half = np.full(n // 2 + 1, 0.5)
    half[0] = 1.0
    if n % 2 == 0:
        half[-1] = 1.0

    def backward(g):
        # adjoint of the half-spectrum rfft, via irfft
        gspec = (g / mag) * spec * half
        gf = np.fft.irfft(gspec, n=n, axis=-1) * n
        return (gf * window,)

    return _make(mag, (frames,), backward, "stft_mag")


# -- recurrent -------------------------------------------------------------------

def gru(xs, h0, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Gated recurrent unit over a sequence, fused into one graph node.

    xs: [B, T, D], h0: [B, H], w_ih: [3H, D], w_hh: [3H, H], biases [3H].
    Gate order in the stacked weights is (reset, update, candidate).
    Returns all hidden states [B, T, H]; an empty sequence returns h0 reshaped
    to [B, 0, H] and the final state is then h0 itself.
    """
    xs, h0 = as_tensor(xs), as_tensor(h0)
    w_ih, w_hh, b_ih, b_hh = (as_tensor(p) for p in (w_ih, w_hh, b_ih, b_hh))
    bsz, steps, d = xs.shape
    hid = h0.shape[1]
    if w_ih.shape != (3 * hid, d) or w_hh.shape != (3 * hid, hid) or h0.shape[0] != bsz:
        raise DimensionError(
            f"gru: xs {xs.shape}, h0 {h0.shape}, w_ih {w_ih.shape}, w_hh {w_hh.shape} inconsistent")
    wi, wh, bi, bh = w_ih.data, w_hh.data, b_ih.data, b_hh.data
    xp = xs.data @ wi.T + bi  # [B, T, 3H]
    dtype = xp.dtype
    hs = np.empty((bsz, steps, hid), dtype=dtype)
    rs = np.empty_like(hs)
    us = np.empty_like(hs)
    ns = np.empty_like(hs)
    hns = np.empty_like(hs)
    h = h0.data
    for t in range(steps):
        hp = h @ wh.T + bh
        x_t = xp[:, t]
        r = _sigmoid(x_t[:, :hid] + hp[:, :hid])
        u = _sigmoid(x_t[:, hid:2 * hid] + hp[:, hid:2 * hid])
        hn = hp[:, 2 * hid:]
        n = np.tanh(x_t[:, 2 * hid:] + r * hn)
        h = (1.0 - u) * n + u * h
        rs[:, t], us[:, t], ns[:, t], hns[:, t], hs[:, t] = r, u, n, hn, h
    xd, h0d = xs.data, h0.data

    def backward(g):
        dxp = np.empty_like(xp)
        dwh = np.zeros_like(wh)
        dbh = np.zeros_like(bh)
        dh = np.zeros((bsz, hid), dtype=dtype)
        for t in range(steps - 1, -1, -1):
            dh = dh + g[:, t]
            h_prev = hs[:, t - 1] if t > 0 else h0d
            r, u, n, hn = rs[:, t], us[:, t], ns[:, t], hns[:, t]
            du = dh * (h_prev - n)
            dn_pre = dh * (1.0 - u) * (1.0 - n * n)
            dr_pre = dn_pre * hn * r * (1.0 - r)
            du_pre = du * u * (1.0 - u)
            dhp = np.concatenate([dr_pre, du_pre, dn_pre * r], axis=1)
            dxp[:, t] = np.concatenate([dr_pre, du_pre, dn_pre], axis=1)
            dwh += dhp.T @ h_prev
            dbh += dhp.sum(axis=0)
            dh = dh * u + dhp @ wh
        flat = dxp.reshape(-1, 3 * hid)
        dwi = flat.T @ xd.reshape(-1, d)
        dbi = flat.sum(axis=0)
        return dxp @ wi, dh, dwi, dwh, dbi, dbh

    return _make(hs, (xs, h0, w_ih, w_hh, b_ih, b_hh), backward, "gru")


def gru_cell(x, h, w_ih, w_hh, b_ih, b_hh) -> Tensor:
    """Single GRU update h' = (1-u)*n + u*h for x: [B, D] (or [D]), h: [B, H]."""
    x, h = as_tensor(x), as_tensor(h)
    squeeze = x.ndim == 1
    if squeeze:
        x, h = x.reshape(1, 1, -1), h.reshape(1, -1)
    else:
        x = x.reshape(x.shape[0], 1, x.shape[1])
    out = gru(x, h, w_ih, w_hh, b_ih, b_hh)
    return out.reshape(-1) if squeeze else out.reshape(out.shape[0], out.shape[2])


# -- classification ---------------------------------------------------------------

def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,),
                 lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels: np.ndarray) -> Tensor:
    logp = log_softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    picked = index(logp, (np.arange(labels.shape[0]), labels))
    return -mean(picked)


# -- parameters & optimisation --------------------------------------------------------

def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), requires_grad=True, name=name)


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                    slope: float = 0.2) -> np.ndarray:
    """Uniform in +-sqrt(6 / ((1 + slope^2) * fan_in)), the leaky-rectifier gain."""
    bound = math.sqrt(6.0 / ((1.0 + slope * slope) * max(fan_in, 1)))
    return rng.uniform(-bound, bound, size=shape)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in); used for biases and recurrent weights."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class NonFiniteGradient(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for k in self.params:
            self.m[k] = np.array(arrays[f"adam.m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(arrays[f"adam.v.{k}"], dtype=self.params[k].data.dtype)
        self.step_count = step_count


# -- gradient checking -------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``param.data``."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data)
            flat[i] = orig - eps
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, p, eps)))
    return worst
