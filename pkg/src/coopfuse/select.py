"""Adaptive block-sparse feature refinement.

The feature plane is tiled into non-overlapping windows at each configured
scale. A linear scorer ranks windows; the top-k fraction of still-eligible
windows routes through global linear attention, the rest through a per-token
inverted bottleneck. Windows discarded at a fine scale become ineligible at
coarser scales. Per-scale outputs are fused by channel-wise split attention.

Scoring and mask construction are plain numpy: the binary top-k mask of the
partition carries no gradient, only the routed feature values do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .ops import (concat, conv2d, elu_plus_one, global_pool, index_axis,
                  matmul, relu, reshape, softmax, take_rows, transpose, tsum)
from .sync import ParamBlock, identity_kernel
from .tensor import Tensor


class BlockGrid:
    """Partition of an H x W plane into non-overlapping scale x scale windows."""

    def __init__(self, height: int, width: int, scale: int):
        if height % scale or width % scale:
            raise ValueError(f"scale {scale} does not divide grid {height}x{width}")
        self.height = height
        self.width = width
        self.scale = scale
        self.n_rows = height // scale
        self.n_cols = width // scale
        self.n_blocks = self.n_rows * self.n_cols

    def descriptors(self, feature: np.ndarray) -> np.ndarray:
        """Mean-pool each window: returns n_blocks x C."""
        c = feature.shape[0]
        s = self.scale
        r = feature.reshape(c, self.n_rows, s, self.n_cols, s)
        return r.mean(axis=(2, 4)).reshape(c, self.n_blocks).T

    def coverage(self, eligibility: np.ndarray) -> np.ndarray:
        """Eligible-pixel count per window, flat n_blocks."""
        s = self.scale
        r = eligibility.reshape(self.n_rows, s, self.n_cols, s)
        return r.sum(axis=(1, 3)).reshape(-1)

    def to_pixels(self, block_values: np.ndarray) -> np.ndarray:
        """Replicate per-block values to pixel resolution."""
        grid = block_values.reshape(self.n_rows, self.n_cols)
        return np.kron(grid, np.ones((self.scale, self.scale)))


@dataclass
class SelectionMask:
    block_mask: np.ndarray      # n_rows x n_cols, values in {0, 1}
    pixel_mask: np.ndarray      # H x W materialization
    retained_count: int
    grid: BlockGrid


def score_blocks(feature: np.ndarray, grid: BlockGrid, eligibility: np.ndarray,
                 weight: np.ndarray, bias: float) -> np.ndarray:
    """Linear importance score per window; zero-coverage windows score -inf."""
    if eligibility.shape != (grid.height, grid.width):
        raise ValueError(f"eligibility shape {eligibility.shape} does not match grid "
                         f"{grid.height}x{grid.width}")
    scores = grid.descriptors(feature) @ np.asarray(weight, dtype=np.float64) + bias
    scores = scores.astype(np.float64)
    scores[grid.coverage(eligibility) == 0] = -np.inf
    return scores


def topk_select(scores: np.ndarray, k: float, grid: BlockGrid) -> SelectionMask:
    """Retain the ceil(k * n_eligible) best-scoring eligible windows.

    Ties break toward the lower flat block index.
    """
    if not 0.0 < k <= 1.0:
        raise ValueError(f"retention fraction must lie in (0, 1], got {k}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    eligible = np.isfinite(scores)
    n_eligible = int(eligible.sum())
    if n_eligible == 0:
        raise ValueError("no eligible blocks to select from")
    retained = min(n_eligible, int(math.ceil(k * n_eligible - 1e-9)))
    order = np.argsort(-scores, kind="stable")
    chosen = order[:retained]
    block_mask = np.zeros(grid.n_blocks)
    block_mask[chosen] = 1.0
    return SelectionMask(
        block_mask=block_mask.reshape(grid.n_rows, grid.n_cols),
        pixel_mask=grid.to_pixels(block_mask),
        retained_count=retained,
        grid=grid,
    )


def propagate_mask(mask_initial: np.ndarray, selection: SelectionMask) -> np.ndarray:
    """Subtract the discarded-region pixels from the mask, clamped to [0, 1]."""
    discarded = selection.grid.to_pixels(1.0 - selection.block_mask.reshape(-1))
    return np.clip(mask_initial - discarded, 0.0, 1.0)


class LinearAttention(ParamBlock):
    """Non-causal linear attention with a positive kernel feature map.

    Output is residual: token + gate(token) * normalized attention read,
    where the gate is a plain linear map (zero weights give the identity).
    """

    def __init__(self, c: int, rng: np.random.Generator, prefix: str):
        super().__init__()
        s = 0.5 / math.sqrt(c)
        self.wq = self._p(f"{prefix}.wq", s * rng.standard_normal((c, c)))
        self.wk = self._p(f"{prefix}.wk", s * rng.standard_normal((c, c)))
        self.wv = self._p(f"{prefix}.wv", s * rng.standard_normal((c, c)))
        self.wg = self._p(f"{prefix}.wg", np.zeros((c, c)))
        self.bg = self._p(f"{prefix}.bg", np.zeros((1, c)))

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.data.ndim != 2 or tokens.data.shape[0] == 0:
            raise ValueError(f"attention needs a nonempty TxC token set, "
                             f"got {tokens.data.shape}")
        fq = elu_plus_one(matmul(tokens, self.wq))
        fk = elu_plus_one(matmul(tokens, self.wk))
        v = matmul(tokens, self.wv)
        kv = matmul(transpose(fk, (1, 0)), v)                    # C x C
        num = matmul(fq, kv)                                     # T x C
        den = matmul(fq, transpose(tsum(fk, axis=0, keepdims=True), (1, 0)))  # T x 1
        gate = matmul(tokens, self.wg) + self.bg
        return tokens + gate * (num / den)


class InvertedBottleneck(ParamBlock):
    """Per-token expand-nonlinearity-project with residual; no cross-token mixing."""

    def __init__(self, c: int, rng: np.random.Generator, ratio: int = 4, prefix: str = "ib"):
        super().__init__()
        s = 0.5 / math.sqrt(c)
        self.w1 = self._p(f"{prefix}.w1", s * rng.standard_normal((c, ratio * c)))
        self.b1 = self._p(f"{prefix}.b1", np.zeros((1, ratio * c)))
        self.w2 = self._p(f"{prefix}.w2", np.zeros((ratio * c, c)))
        self.b2 = self._p(f"{prefix}.b2", np.zeros((1, c)))

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.data.shape[0] == 0:
            return tokens
        hidden = relu(matmul(tokens, self.w1) + self.b1)
        return tokens + matmul(hidden, self.w2) + self.b2


class SplitAttention(ParamBlock):
    """Per-channel softmax weighting across scale outputs, shared perceptron."""

    def __init__(self, c: int, rng: np.random.Generator, prefix: str = "split"):
        super().__init__()
        hidden = max(1, c // 2)
        self.w1 = self._p(f"{prefix}.w1", 0.1 * rng.standard_normal((c, hidden)))
        self.b1 = self._p(f"{prefix}.b1", np.zeros((1, hidden)))
        self.w2 = self._p(f"{prefix}.w2", 0.1 * rng.standard_normal((hidden, c)))
        self.b2 = self._p(f"{prefix}.b2", np.zeros((1, c)))

    def weights(self, scale_outputs: list[Tensor]) -> Tensor:
        logits = []
        for f in scale_outputs:
            pooled = reshape(global_pool(global_pool(f, 2, "avg"), 1, "avg"), (1, -1))
            z = relu(matmul(pooled, self.w1) + self.b1)
            logits.append(matmul(z, self.w2) + self.b2)
        return softmax(concat(logits, axis=0), axis=0)       # n_scales x C

    def __call__(self, scale_outputs: list[Tensor]) -> Tensor:
        w = self.weights(scale_outputs)
        c = scale_outputs[0].data.shape[0]
        out = None
        for i, f in enumerate(scale_outputs):
            term = reshape(index_axis(w, 0, i), (c, 1, 1)) * f
            out = term if out is None else out + term
        return out


class FeatureSelector(ParamBlock):
    """Multi-scale top-k routing with cross-scale mask propagation."""

    def __init__(self, c: int, scales: tuple[int, ...], retention: float,
                 rng: np.random.Generator, prefix: str = "select"):
        super().__init__()
        self.c = c
        self.scales = tuple(scales)
        self.retention = float(retention)
        # the scorer never receives gradient through the binary mask, so it
        # starts as channel-mean saliency rather than noise
        self.score_weight = self._p(f"{prefix}.score.weight", np.full(c, 1.0 / c))
        self.score_bias = self._p(f"{prefix}.score.bias", np.zeros(1))
        self.attention = LinearAttention(c, rng, prefix=f"{prefix}.attn")
        self.bottleneck = InvertedBottleneck(c, rng, prefix=f"{prefix}.ib")
        agg = identity_kernel(c) + 0.01 * rng.standard_normal((c, c, 3, 3))
        self.agg_kernel = self._p(f"{prefix}.agg.kernel", agg)
        self.agg_bias = self._p(f"{prefix}.agg.bias", np.zeros((c, 1, 1)))
        self.split = SplitAttention(c, rng, prefix=f"{prefix}.split")
        for sub in (self.attention, self.bottleneck, self.split):
            self.params.update(sub.params)

    def __call__(self, feature: Tensor, scales=None, k: float = None) -> Tensor:
        scales = self.scales if scales is None else tuple(scales)
        k = self.retention if k is None else float(k)
        if not 0.0 < k <= 1.0:
            raise ValueError(f"retention fraction must lie in (0, 1], got {k}")
        c, h, w = feature.data.shape
        for s in scales:
            if h % s or w % s:
                raise ValueError(f"scale {s} does not divide grid {h}x{w}")
        eligibility = np.ones((h, w))
        flat = transpose(reshape(feature, (c, h * w)), (1, 0))       # HW x C
        outputs = []
        for s in scales:
            grid = BlockGrid(h, w, s)
            scores = score_blocks(feature.data, grid, eligibility,
                                  self.score_weight.data, float(self.score_bias.data[0]))
            if not np.any(np.isfinite(scores)):
                outputs.append(feature)   # nothing eligible: passthrough
                continue
            selection = topk_select(scores, k, grid)
            sel_idx = np.flatnonzero(selection.pixel_mask.reshape(-1) > 0.5)
            un_idx = np.flatnonzero(selection.pixel_mask.reshape(-1) <= 0.5)
            enhanced = self.attention(take_rows(flat, sel_idx))
            if un_idx.size:
                recovered = self.bottleneck(take_rows(flat, un_idx))
                rows = concat([enhanced, recovered], axis=0)
            else:
                rows = enhanced
            inv = np.argsort(np.concatenate([sel_idx, un_idx]))
            restored = reshape(transpose(take_rows(rows, inv), (1, 0)), (c, h, w))
            outputs.append(conv2d(restored, self.agg_kernel, pad=1) + self.agg_bias)
            eligibility = propagate_mask(eligibility, selection)
        return self.split(outputs)
