"""Differentiable operations on Tensor.

Every operation here runs a plain numpy forward pass and, when a Tape is
active and some input requires grad, records a closure that propagates the
output gradient to its inputs. ``DIFFERENTIABLE_OPS`` lists every op that
participates in gradient checking; adding an op without extending gradcheck
coverage fails the gradient suite.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, active_tape, as_tensor

DIFFERENTIABLE_OPS: list[str] = []


def _diffop(fn):
    DIFFERENTIABLE_OPS.append(fn.__name__)
    return fn


def _record(out: Tensor, fn) -> None:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, fn)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over axes that were broadcast, so it matches `shape`."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules apply)
# ---------------------------------------------------------------------------

@_diffop
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, bwd)
    return out


@_diffop
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    _record(out, bwd)
    return out


@_diffop
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    _record(out, bwd)
    return out


@_diffop
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    _record(out, bwd)
    return out


@_diffop
def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)

    def bwd(g):
        a.accumulate_grad(-g)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

@_diffop
def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g * y)

    _record(out, bwd)
    return out


@_diffop
def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g / a.data)

    _record(out, bwd)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-sided form avoids overflow in exp
    pos = x >= 0
    z = np.empty_like(x)
    z[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    z[~pos] = e / (1.0 + e)
    return z


@_diffop
def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g * y * (1.0 - y))

    _record(out, bwd)
    return out


@_diffop
def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    y = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g * _sigmoid(x))

    _record(out, bwd)
    return out


@_diffop
def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g * (a.data > 0.0))

    _record(out, bwd)
    return out


@_diffop
def elu_plus_one(a) -> Tensor:
    """exp(x) for x<=0, x+1 for x>0: a strictly positive kernel feature map."""
    a = as_tensor(a)
    x = a.data
    pos = x > 0.0
    e = np.exp(np.minimum(x, 0.0))
    y = np.where(pos, x + 1.0, e)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g * np.where(pos, 1.0, e))

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# reductions and matmul
# ---------------------------------------------------------------------------

@_diffop
def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), a.requires_grad)

    def bwd(g):
        if axis is None:
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.data.shape))

    _record(out, bwd)
    return out


@_diffop
def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def scale(a, s: float) -> Tensor:
    return mul(a, float(s))


@_diffop
def max_reduce(a, axis: int) -> Tensor:
    """Maximum along one axis; gradient routes to the first (lowest-index) argmax."""
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError(f"max_reduce over empty axis {axis} of shape {a.data.shape}")
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis), a.requires_grad)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a.accumulate_grad(full)

    _record(out, bwd)
    return out


@_diffop
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.data.shape} @ {b.data.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

@_diffop
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), a.requires_grad)

    def bwd(g):
        a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, bwd)
    return out


@_diffop
def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(a.data.transpose(axes), a.requires_grad)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        a.accumulate_grad(g.transpose(inv))

    _record(out, bwd)
    return out


@_diffop
def concat(parts, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis),
                 any(p.requires_grad for p in parts))
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        start = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + n)
                p.accumulate_grad(g[tuple(sl)])
            start += n

    _record(out, bwd)
    return out


@_diffop
def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl], a.requires_grad)

    def bwd(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        a.accumulate_grad(full)

    _record(out, bwd)
    return out


@_diffop
def index_axis(a, axis: int, i: int) -> Tensor:
    """Select one index along an axis, removing that axis."""
    a = as_tensor(a)
    out = Tensor(np.take(a.data, i, axis=axis), a.requires_grad)

    def bwd(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.data.ndim
        sl[axis] = i
        full[tuple(sl)] = g
        a.accumulate_grad(full)

    _record(out, bwd)
    return out


@_diffop
def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by `pad` on every side."""
    a = as_tensor(a)
    if pad == 0:
        return a
    width = [(0, 0)] * (a.data.ndim - 2) + [(pad, pad), (pad, pad)]
    out = Tensor(np.pad(a.data, width), a.requires_grad)

    def bwd(g):
        sl = (Ellipsis, slice(pad, -pad), slice(pad, -pad))
        a.accumulate_grad(g[sl])

    _record(out, bwd)
    return out


@_diffop
def take_rows(a, idx: np.ndarray) -> Tensor:
    """Gather rows of a rank-2 tensor. Duplicate indices accumulate on backward."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"take_rows expects a rank-2 tensor, got {a.data.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(a.data[idx], a.requires_grad)

    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        a.accumulate_grad(full)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# neural-network kernels
# ---------------------------------------------------------------------------

@_diffop
def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    x = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y, a.requires_grad)

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        a.accumulate_grad(y * (g - dot))

    _record(out, bwd)
    return out


@_diffop
def conv2d(x, kernel, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of a C_in x H x W input with C_out x C_in x k x k weights."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects CxHxW input and OxIxkxk kernel, got "
                         f"{x.data.shape} and {kernel.data.shape}")
    c_in, h, w = x.data.shape
    c_out, kc_in, k, k2 = kernel.data.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d kernel must be square with odd size, got {kernel.data.shape}")
    if kc_in != c_in:
        raise ValueError(f"conv2d channel mismatch: input has shape {x.data.shape} "
                         f"(C_in={c_in}) but kernel has shape {kernel.data.shape} (C_in={kc_in})")
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ValueError(f"conv2d spatial extent too small: input {h}x{w}, pad {pad}, kernel {k}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be positive, got {stride}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (w + 2 * pad - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h_out * w_out)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = Tensor((wmat @ cols).reshape(c_out, h_out, w_out),
                 x.requires_grad or kernel.requires_grad)

    def bwd(g):
        gm = g.reshape(c_out, h_out * w_out)
        if kernel.requires_grad:
            kernel.accumulate_grad((gm @ cols.T).reshape(kernel.data.shape))
        if x.requires_grad:
            if stride == 1:
                # dx = correlation of g with the in/out-swapped, 180-rotated kernel
                gp = np.pad(g, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
                gwin = sliding_window_view(gp, (k, k), axis=(1, 2))
                gcols = gwin.transpose(0, 3, 4, 1, 2).reshape(c_out * k * k,
                                                              (h + 2 * pad) * (w + 2 * pad))
                wrot = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dxp = (wrot.reshape(c_in, c_out * k * k) @ gcols).reshape(xp.shape)
            else:
                dcols = (wmat.T @ gm).reshape(c_in, k, k, h_out, w_out)
                dxp = np.zeros_like(xp)
                for ki in range(k):
                    for kj in range(k):
                        dxp[:, ki:ki + stride * h_out:stride,
                            kj:kj + stride * w_out:stride] += dcols[:, ki, kj]
            x.accumulate_grad(dxp[:, pad:pad + h, pad:pad + w] if pad else dxp)

    _record(out, bwd)
    return out


@_diffop
def bilinear_sample(x, coords) -> Tensor:
    """Sample a C x H x W grid at fractional (row, col) positions.

    coords is 2 x H' x W'; positions outside [0,H-1] x [0,W-1] read zero.
    Differentiable in the grid values and in the coordinates.
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if x.data.ndim != 3:
        raise ValueError(f"bilinear_sample expects CxHxW input, got {x.data.shape}")
    if coords.data.ndim != 3 or coords.data.shape[0] != 2:
        raise ValueError(f"bilinear_sample coords must be 2xHxW, got {coords.data.shape}")
    c, h, w = x.data.shape
    r, cc = coords.data[0], coords.data[1]
    r0 = np.floor(r).astype(np.intp)
    c0 = np.floor(cc).astype(np.intp)
    wr = r - r0
    wc = cc - c0

    rin0 = (r0 >= 0) & (r0 < h)
    rin1 = (r0 >= -1) & (r0 < h - 1)
    cin0 = (c0 >= 0) & (c0 < w)
    cin1 = (c0 >= -1) & (c0 < w - 1)
    masks = (rin0 & cin0, rin0 & cin1, rin1 & cin0, rin1 & cin1)
    weights = ((1 - wr) * (1 - wc), (1 - wr) * wc, wr * (1 - wc), wr * wc)
    r0c = r0.clip(0, h - 1)
    c0c = c0.clip(0, w - 1)
    r1c = (r0 + 1).clip(0, h - 1)
    c1c = (c0 + 1).clip(0, w - 1)
    flats = ((r0c * w + c0c).ravel(), (r0c * w + c1c).ravel(),
             (r1c * w + c0c).ravel(), (r1c * w + c1c).ravel())
    xf = x.data.reshape(c, h * w)
    corner_vals = tuple(xf[:, f].reshape(c, *r.shape) * m
                        for f, m in zip(flats, masks))
    y = (corner_vals[0] * weights[0] + corner_vals[1] * weights[1]
         + corner_vals[2] * weights[2] + corner_vals[3] * weights[3])
    out = Tensor(y, x.requires_grad or coords.requires_grad)

    def bwd(g):
        if x.requires_grad:
            dx = np.zeros((c, h * w))
            for flat, wt, valid in zip(flats, weights, masks):
                contrib = (g * (wt * valid)).reshape(c, -1)
                np.add.at(dx.T, flat, contrib.T)
            x.accumulate_grad(dx.reshape(c, h, w))
        if coords.requires_grad:
            v00, v01, v10, v11 = corner_vals
            dy_dwr = -(1 - wc) * v00 - wc * v01 + (1 - wc) * v10 + wc * v11
            dy_dwc = -(1 - wr) * v00 + (1 - wr) * v01 - wr * v10 + wr * v11
            gr = (g * dy_dwr).sum(axis=0)
            gc = (g * dy_dwc).sum(axis=0)
            coords.accumulate_grad(np.stack([gr, gc]))

    _record(out, bwd)
    return out


@_diffop
def global_pool(x, axis: int, mode: str) -> Tensor:
    """Reduce one axis by max or arithmetic mean, removing it."""
    x = as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ValueError(f"global_pool over empty axis {axis} of shape {x.data.shape}")
    if mode == "max":
        return max_reduce(x, axis)
    if mode == "avg":
        return tmean(x, axis=axis)
    raise ValueError(f"global_pool mode must be 'max' or 'avg', got {mode!r}")


@_diffop
def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy in the numerically stable logit form."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(loss.mean(), logits.requires_grad)

    def bwd(g):
        logits.accumulate_grad(g * (_sigmoid(z) - t) / z.size)

    _record(out, bwd)
    return out


@_diffop
def linear_recurrence(a, b) -> Tensor:
    """Diagonal linear scan h_t = a_t * h_{t-1} + b_t over the leading axis, h_0 = 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"linear_recurrence shape mismatch: {a.data.shape} vs {b.data.shape}")
    if a.data.shape[0] == 0:
        raise ValueError("linear_recurrence needs a nonempty sequence")
    ad, bd = a.data, b.data
    n = ad.shape[0]
    h = np.empty_like(bd)
    h[0] = bd[0]
    for t in range(1, n):
        np.multiply(ad[t], h[t - 1], out=h[t])
        h[t] += bd[t]
    out = Tensor(h, a.requires_grad or b.requires_grad)

    def bwd(g):
        gh = np.empty_like(g)
        gh[n - 1] = g[n - 1]
        for t in range(n - 2, -1, -1):
            np.multiply(ad[t + 1], gh[t + 1], out=gh[t])
            gh[t] += g[t]
        if b.requires_grad:
            b.accumulate_grad(gh)
        if a.requires_grad:
            da = np.zeros_like(ad)
            np.multiply(gh[1:], h[:-1], out=da[1:])
            a.accumulate_grad(da)

    _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# operator sugar on Tensor
# ---------------------------------------------------------------------------

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(o, self)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: sub(o, self)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(o, self)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__rtruediv__ = lambda self, o: div(o, self)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.sum = lambda self, axis=None, keepdims=False: tsum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: tmean(self, axis, keepdims)
