"""Finite-difference validation of the reverse-mode gradients.

``grad_check`` compares the tape gradient of a scalar-valued function
against central differences, element by element. ``registered_cases``
returns one scalar test function per differentiable op, so the gradient
suite can assert full coverage of ``ops.DIFFERENTIABLE_OPS``.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tape, Tensor


def grad_check(scalar_fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Return the max relative error between tape and central-difference gradients."""
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = scalar_fn(probe)
    if y.data.size != 1:
        raise ValueError(f"scalar_fn must return a scalar, got shape {y.data.shape}")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    flat = x.data.reshape(-1).copy()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = scalar_fn(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig - eps
        dn = scalar_fn(Tensor(flat.reshape(x.data.shape))).item()
        flat[i] = orig
        numeric[i] = (up - dn) / (2.0 * eps)

    an = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(an), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(an - numeric) / denom))


def _away_from_zero(rng: np.random.Generator, shape, lo: float = 0.2) -> np.ndarray:
    """Uniform values in [-1.5, 1.5] nudged at least `lo` from 0 (kink safety)."""
    x = rng.uniform(-1.5, 1.5, size=shape)
    return x + lo * np.sign(x + 1e-12)


def registered_cases() -> dict[str, Callable[[int], tuple[Callable, Tensor]]]:
    """Map op name -> builder(seed) -> (scalar_fn, input tensor)."""

    def simple(op_of_x):
        def build(seed):
            rng = np.random.default_rng(seed)
            x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
            return (lambda t: ops.tsum(ops.mul(op_of_x(t), op_of_x(t)))), x
        return build

    def kink(op_of_x):
        def build(seed):
            rng = np.random.default_rng(seed)
            x = Tensor(_away_from_zero(rng, (3, 4)))
            return (lambda t: ops.tsum(ops.mul(op_of_x(t), op_of_x(t)))), x
        return build

    def build_add(seed):
        rng = np.random.default_rng(seed)
        other = rng.uniform(-1.0, 1.0, size=(1, 4))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.add(t, other), ops.add(t, other)))), x

    def build_sub(seed):
        rng = np.random.default_rng(seed)
        other = rng.uniform(-1.0, 1.0, size=(3, 1))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.sub(t, other), ops.sub(other, t)))), x

    def build_mul(seed):
        rng = np.random.default_rng(seed)
        other = rng.uniform(0.5, 1.5, size=(3, 4))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(t, ops.mul(t, other)))), x

    def build_div(seed):
        rng = np.random.default_rng(seed)
        other = rng.uniform(0.8, 1.8, size=(3, 4))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.div(ops.mul(t, t), ops.add(ops.mul(t, t), other)))), x

    def build_exp(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.exp(ops.scale(t, 0.5)))), x

    def build_log(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
        return (lambda t: ops.tsum(ops.log(ops.add(ops.mul(t, t), 0.5)))), x

    def build_matmul(seed):
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1.0, 1.0, size=(4, 2))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.matmul(t, w), ops.matmul(t, w)))), x

    def build_max_reduce(seed):
        rng = np.random.default_rng(seed)
        # separate values so the argmax is unambiguous under the probe step
        base = rng.permutation(12).reshape(3, 4) * 0.25 - 1.4
        x = Tensor(base)
        return (lambda t: ops.tsum(ops.mul(ops.max_reduce(t, 1), ops.max_reduce(t, 1)))), x

    def build_global_pool(seed):
        rng = np.random.default_rng(seed)
        base = rng.permutation(24).reshape(2, 3, 4) * 0.12 - 1.4
        x = Tensor(base)

        def f(t):
            mx = ops.global_pool(t, 0, "max")
            av = ops.global_pool(t, 0, "avg")
            return ops.tsum(ops.mul(ops.add(mx, av), ops.add(mx, av)))
        return f, x

    def build_reshape(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.reshape(t, (2, 6)), ops.reshape(t, (2, 6))))), x

    def build_transpose(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(2, 3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.transpose(t, (2, 0, 1)),
                                           ops.transpose(t, (2, 0, 1))))), x

    def build_concat(seed):
        rng = np.random.default_rng(seed)
        other = rng.uniform(-1.0, 1.0, size=(2, 4))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))

        def f(t):
            c = ops.concat([t, Tensor(other), ops.scale(t, 0.5)], axis=0)
            return ops.tsum(ops.mul(c, c))
        return f, x

    def build_narrow(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 5)))
        return (lambda t: ops.tsum(ops.mul(ops.narrow(t, 1, 1, 3), ops.narrow(t, 1, 1, 3)))), x

    def build_index_axis(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.index_axis(t, 0, 1), ops.index_axis(t, 0, 1)))), x

    def build_pad2d(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(2, 3, 3)))
        return (lambda t: ops.tsum(ops.mul(ops.pad2d(t, 1), ops.pad2d(t, 1)))), x

    def build_take_rows(seed):
        rng = np.random.default_rng(seed)
        idx = np.array([2, 0, 1, 0])
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.take_rows(t, idx), ops.take_rows(t, idx)))), x

    def build_softmax(seed):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.tsum(ops.mul(ops.softmax(t, 1), ops.softmax(t, 1)))), x

    def build_conv2d(seed):
        rng = np.random.default_rng(seed)
        k = rng.uniform(-0.8, 0.8, size=(3, 2, 3, 3))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(2, 5, 5)))
        return (lambda t: ops.tsum(ops.mul(ops.conv2d(t, k, stride=1, pad=1),
                                           ops.conv2d(t, k, stride=1, pad=1)))), x

    def build_conv2d_kernel(seed):
        rng = np.random.default_rng(seed)
        inp = rng.uniform(-1.5, 1.5, size=(2, 5, 5))
        x = Tensor(rng.uniform(-0.8, 0.8, size=(3, 2, 3, 3)))
        return (lambda t: ops.tsum(ops.mul(ops.conv2d(inp, t, stride=2, pad=1),
                                           ops.conv2d(inp, t, stride=2, pad=1)))), x

    def build_bilinear(seed):
        rng = np.random.default_rng(seed)
        h = w = 5
        rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                             indexing="ij")
        coords = np.stack([rr + 0.3, cc - 0.4])
        x = Tensor(rng.uniform(-1.5, 1.5, size=(2, h, w)))
        return (lambda t: ops.tsum(ops.mul(ops.bilinear_sample(t, coords),
                                           ops.bilinear_sample(t, coords)))), x

    def build_bilinear_coords(seed):
        rng = np.random.default_rng(seed)
        h = w = 5
        grid = rng.uniform(-1.5, 1.5, size=(2, h, w))
        rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float),
                             indexing="ij")
        x = Tensor(np.stack([rr + 0.31, cc - 0.27]))
        return (lambda t: ops.tsum(ops.mul(ops.bilinear_sample(grid, t),
                                           ops.bilinear_sample(grid, t)))), x

    def build_bce(seed):
        rng = np.random.default_rng(seed)
        targets = rng.integers(0, 2, size=(3, 4)).astype(float)
        x = Tensor(rng.uniform(-1.5, 1.5, size=(3, 4)))
        return (lambda t: ops.bce_with_logits(t, targets)), x

    def build_linear_recurrence(seed):
        rng = np.random.default_rng(seed)
        a = rng.uniform(0.2, 0.9, size=(5, 2, 3))
        x = Tensor(rng.uniform(-1.5, 1.5, size=(5, 2, 3)))

        def f(t):
            h = ops.linear_recurrence(Tensor(a), t)
            return ops.tsum(ops.mul(h, h))
        return f, x

    def build_linear_recurrence_decay(seed):
        rng = np.random.default_rng(seed)
        b = rng.uniform(-1.0, 1.0, size=(5, 2, 3))
        x = Tensor(rng.uniform(0.2, 0.9, size=(5, 2, 3)))

        def f(t):
            h = ops.linear_recurrence(t, Tensor(b))
            return ops.tsum(ops.mul(h, h))
        return f, x

    cases = {
        "add": build_add,
        "sub": build_sub,
        "mul": build_mul,
        "div": build_div,
        "neg": simple(lambda t: ops.neg(t)),
        "exp": build_exp,
        "log": build_log,
        "sigmoid": simple(lambda t: ops.sigmoid(t)),
        "softplus": simple(lambda t: ops.softplus(t)),
        "relu": kink(lambda t: ops.relu(t)),
        "elu_plus_one": kink(lambda t: ops.elu_plus_one(t)),
        "tsum": simple(lambda t: ops.tsum(t, axis=0, keepdims=True)),
        "tmean": simple(lambda t: ops.tmean(t, axis=1)),
        "max_reduce": build_max_reduce,
        "matmul": build_matmul,
        "reshape": build_reshape,
        "transpose": build_transpose,
        "concat": build_concat,
        "narrow": build_narrow,
        "index_axis": build_index_axis,
        "pad2d": build_pad2d,
        "take_rows": build_take_rows,
        "softmax": build_softmax,
        "conv2d": build_conv2d,
        "conv2d_kernel": build_conv2d_kernel,
        "bilinear_sample": build_bilinear,
        "bilinear_sample_coords": build_bilinear_coords,
        "global_pool": build_global_pool,
        "bce_with_logits": build_bce,
        "linear_recurrence": build_linear_recurrence,
        "linear_recurrence_decay": build_linear_recurrence_decay,
    }
    return cases
