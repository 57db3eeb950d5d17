"""Temporal synchronization of delayed multi-agent features.

The ego fuses whatever collaborator features have arrived (max/avg pooled
across agents, collapsed by a learned depth-2 convolution), keeps the K
most recent fused maps in a buffer, and rolls a recurrent unit over the
buffer: predict a motion offset from the two preceding entries, warp the
previous entry by it, blend the warped estimate with the hidden state
through a convex gate, then refine the state with a second deformable
update. The final hidden state is anchored to the ego's own real-time
feature by deformable cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (bilinear_sample, concat, conv2d, global_pool, index_axis,
                  matmul, narrow, relu, reshape, sigmoid, softmax)
from .tensor import Parameter, Tensor

_GRID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def base_grid(h: int, w: int) -> np.ndarray:
    """Integer (row, col) sampling grid, shape 2 x h x w."""
    key = (h, w)
    if key not in _GRID_CACHE:
        rr, cc = np.meshgrid(np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")
        _GRID_CACHE[key] = np.stack([rr, cc])
    return _GRID_CACHE[key]


def identity_kernel(c: int, k: int = 3) -> np.ndarray:
    ker = np.zeros((c, c, k, k))
    for i in range(c):
        ker[i, i, k // 2, k // 2] = 1.0
    return ker


class ParamBlock:
    """Base for parameterized blocks: owns a flat name -> Parameter dict."""

    def __init__(self):
        self.params: dict[str, Parameter] = {}

    def _p(self, name: str, data) -> Parameter:
        p = Parameter(np.asarray(data, dtype=np.float64), name)
        self.params[name] = p
        return p

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.params)


class FeatureBuffer:
    """The K most recent fused features, oldest first, one tick apart."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.entries: list[Tensor] = []
        self.ticks: list[int] = []

    def push(self, feature: Tensor, tick: int) -> None:
        if self.ticks and tick != self.ticks[-1] + 1:
            raise ValueError(f"buffer ticks must advance by one: {self.ticks[-1]} -> {tick}")
        self.entries.append(feature)
        self.ticks.append(tick)
        if len(self.entries) > self.capacity:
            self.entries.pop(0)
            self.ticks.pop(0)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class GateOutput:
    alpha: Tensor
    fused: Tensor


class Integrator(ParamBlock):
    """Max/avg pool over the agent axis, then a depth-2 collapsing conv.

    The depth-2 3D convolution over the stacked pooled maps is realized as a
    2D convolution on their channel concatenation (identical arithmetic).
    Initialized near the stream-averaging identity.
    """

    def __init__(self, c: int, rng: np.random.Generator, prefix: str = "integrate"):
        super().__init__()
        ker = np.zeros((c, 2 * c, 3, 3))
        for i in range(c):
            ker[i, i, 1, 1] = 0.5
            ker[i, c + i, 1, 1] = 0.5
        ker += 0.01 * rng.standard_normal(ker.shape)
        self.kernel = self._p(f"{prefix}.kernel", ker)
        self.bias = self._p(f"{prefix}.bias", np.zeros((c, 1, 1)))

    def __call__(self, stack: Tensor) -> Tensor:
        if stack.data.ndim != 4 or stack.data.shape[0] < 1:
            raise ValueError(f"integrator needs a nonempty NxCxHxW stack, got {stack.data.shape}")
        mx = global_pool(stack, 0, "max")
        av = global_pool(stack, 0, "avg")
        return conv2d(concat([mx, av], axis=0), self.kernel, pad=1) + self.bias


class TemporalSync(ParamBlock):
    """Recurrent rollout over the feature buffer plus ego anchoring."""

    def __init__(self, c: int, rng: np.random.Generator, n_anchor_points: int = 4,
                 gate_reduction: int = 4, prefix: str = "sync"):
        super().__init__()
        self.c = c
        self.m = n_anchor_points
        # offset predictors start at zero so the rollout starts as a fixed
        # point on constant buffers; warp convs start at the exact identity
        self.offset_kernel = self._p(f"{prefix}.offset.kernel", np.zeros((2, 2 * c, 3, 3)))
        self.offset_bias = self._p(f"{prefix}.offset.bias", np.zeros((2, 1, 1)))
        self.warp_kernel = self._p(f"{prefix}.warp.kernel", identity_kernel(c))
        self.warp_bias = self._p(f"{prefix}.warp.bias", np.zeros((c, 1, 1)))
        self.update_offset_kernel = self._p(f"{prefix}.update.offset.kernel",
                                            np.zeros((2, c, 3, 3)))
        self.update_offset_bias = self._p(f"{prefix}.update.offset.bias", np.zeros((2, 1, 1)))
        self.update_warp_kernel = self._p(f"{prefix}.update.warp.kernel", identity_kernel(c))
        self.update_warp_bias = self._p(f"{prefix}.update.warp.bias", np.zeros((c, 1, 1)))
        hidden = max(1, (2 * c) // gate_reduction)
        self.gate_spatial_kernel = self._p(f"{prefix}.gate.spatial.kernel",
                                           np.zeros((1, 2 * c, 7, 7)))
        # positive bias starts the gate trusting the freshest warped entry
        # (alpha ~ 0.88) instead of smearing the whole buffer history
        self.gate_spatial_bias = self._p(f"{prefix}.gate.spatial.bias",
                                         np.full((1, 1, 1), 2.0))
        self.gate_w1 = self._p(f"{prefix}.gate.w1", np.zeros((2 * c, hidden)))
        self.gate_b1 = self._p(f"{prefix}.gate.b1", np.zeros((1, hidden)))
        self.gate_w2 = self._p(f"{prefix}.gate.w2", np.zeros((hidden, c)))
        self.gate_b2 = self._p(f"{prefix}.gate.b2", np.zeros((1, c)))
        self.anchor_kernel = self._p(f"{prefix}.anchor.kernel",
                                     np.zeros((3 * self.m, c, 1, 1)))
        self.anchor_bias = self._p(f"{prefix}.anchor.bias", np.zeros((3 * self.m, 1, 1)))

    # -- sub-operations ----------------------------------------------------

    def predict_offset(self, b_prev2: Tensor, b_prev1: Tensor) -> Tensor:
        if b_prev2.data.shape != b_prev1.data.shape:
            raise ValueError(f"offset inputs differ: {b_prev2.data.shape} vs "
                             f"{b_prev1.data.shape}")
        x = concat([b_prev2, b_prev1], axis=0)
        return conv2d(x, self.offset_kernel, pad=1) + self.offset_bias

    def _warp(self, feature: Tensor, offsets: Tensor, kernel: Parameter,
              bias: Parameter) -> Tensor:
        _, h, w = feature.data.shape
        coords = Tensor(base_grid(h, w)) + offsets
        sampled = bilinear_sample(feature, coords)
        return conv2d(sampled, kernel, pad=1) + bias

    def deform_warp(self, feature: Tensor, offsets: Tensor) -> Tensor:
        return self._warp(feature, offsets, self.warp_kernel, self.warp_bias)

    def gate(self, hidden: Tensor, warped: Tensor) -> GateOutput:
        if hidden.data.shape != warped.data.shape:
            raise ValueError(f"gate inputs differ: {hidden.data.shape} vs {warped.data.shape}")
        x = concat([hidden, warped], axis=0)
        spatial = conv2d(x, self.gate_spatial_kernel, pad=3) + self.gate_spatial_bias
        pooled = global_pool(global_pool(x, 2, "avg"), 1, "avg")
        z = relu(matmul(reshape(pooled, (1, -1)), self.gate_w1) + self.gate_b1)
        chan = reshape(matmul(z, self.gate_w2) + self.gate_b2, (self.c, 1, 1))
        alpha = sigmoid(spatial + chan)
        fused = (1.0 - alpha) * hidden + alpha * warped
        return GateOutput(alpha=alpha, fused=fused)

    def update(self, state: Tensor) -> Tensor:
        offs = conv2d(state, self.update_offset_kernel, pad=1) + self.update_offset_bias
        return self._warp(state, offs, self.update_warp_kernel, self.update_warp_bias)

    # -- module forwards ---------------------------------------------------

    def rollout(self, buffer: FeatureBuffer) -> Tensor:
        if len(buffer) == 0:
            raise ValueError("rollout requires a nonempty buffer")
        entries = buffer.entries
        hidden = entries[0]
        zero = Tensor(np.zeros_like(entries[0].data))
        for j in range(1, len(entries)):
            prev2 = entries[j - 2] if j >= 2 else zero
            prev1 = entries[j - 1]
            offs = self.predict_offset(prev2, prev1)
            warped = self.deform_warp(prev1, offs)
            state = self.gate(hidden, warped).fused
            hidden = self.update(state)
        return hidden

    def anchor(self, predicted: Tensor, ego: Tensor) -> Tensor:
        """Deformable cross-attention onto the ego feature, residual form."""
        if predicted.data.shape != ego.data.shape:
            raise ValueError(f"anchor inputs differ: {predicted.data.shape} vs "
                             f"{ego.data.shape}")
        _, h, w = predicted.data.shape
        fields = conv2d(predicted, self.anchor_kernel) + self.anchor_bias
        logits = narrow(fields, 0, 2 * self.m, self.m)
        weights = softmax(logits, axis=0)
        grid = Tensor(base_grid(h, w))
        out = predicted
        for m in range(self.m):
            off = narrow(fields, 0, 2 * m, 2)
            val = bilinear_sample(ego, grid + off)
            w_m = reshape(index_axis(weights, 0, m), (1, h, w))
            out = out + w_m * val
        return out

    def __call__(self, buffer: FeatureBuffer, ego: Tensor) -> Tensor:
        return self.anchor(self.rollout(buffer), ego)
