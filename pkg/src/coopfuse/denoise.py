"""Dual-branch wavelet-domain denoiser.

Global branch: the four subbands are serialized along four scan paths
(progressive high-to-low frequency and spatially interleaved, each forward
and reverse), passed through an input-conditioned diagonal linear recurrence
(selective scan), mapped back to subband layout, summed, projected pointwise
and reconstructed. Local branch: a nested transform/convolution stack on the
channel-concatenated subbands. The two reconstructions are added.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ops import (concat, conv2d, exp, linear_recurrence, matmul, narrow, neg,
                  reshape, softplus, take_rows, transpose, tsum)
from .sync import ParamBlock
from .tensor import Tensor
from .wavelet import SubbandSet, haar_iwt2d, haar_wt2d, subband_concat, subband_split

_ORDER_CACHE: dict[tuple, np.ndarray] = {}

# band positions in the concatenation order LL, LH, HL, HH
_PROGRESSIVE_BANDS = (3, 2, 1, 0)  # HH -> HL -> LH -> LL


def progressive_order(h2: int, w2: int, direction: str) -> np.ndarray:
    """Token order visiting whole subbands from high to low frequency."""
    key = ("prog", h2, w2, direction)
    if key not in _ORDER_CACHE:
        n = h2 * w2
        fwd = np.concatenate([b * n + np.arange(n) for b in _PROGRESSIVE_BANDS])
        _ORDER_CACHE[key] = _directed(fwd, direction)
    return _ORDER_CACHE[key]


def interleaved_order(h2: int, w2: int, direction: str) -> np.ndarray:
    """Token order emitting (LL, LH, HL, HH) at each raster position."""
    key = ("inter", h2, w2, direction)
    if key not in _ORDER_CACHE:
        n = h2 * w2
        fwd = (np.arange(4)[None, :] * n + np.arange(n)[:, None]).ravel()
        _ORDER_CACHE[key] = _directed(fwd, direction)
    return _ORDER_CACHE[key]


def _directed(fwd: np.ndarray, direction: str) -> np.ndarray:
    if direction == "forward":
        return fwd
    if direction == "reverse":
        return fwd[::-1].copy()
    raise ValueError(f"direction must be 'forward' or 'reverse', got {direction!r}")


@dataclass
class ScanSequence:
    """Per-channel token sequence plus the bijection that produced it."""

    values: Tensor            # L x C
    order: np.ndarray         # L flat subband coordinates, a permutation
    band_shape: tuple[int, int, int]   # (C, H/2, W/2)


def _bands_to_rows(bands: SubbandSet) -> Tensor:
    c, h2, w2 = bands.shape
    cat = subband_concat(bands)                       # 4C x h2 x w2
    return reshape(transpose(reshape(cat, (4, c, h2 * w2)), (0, 2, 1)), (4 * h2 * w2, c))


def _rows_to_bands(rows: Tensor, band_shape: tuple[int, int, int]) -> SubbandSet:
    c, h2, w2 = band_shape
    cat = reshape(transpose(reshape(rows, (4, h2 * w2, c)), (0, 2, 1)), (4 * c, h2, w2))
    return subband_split(cat)


def progressive_scan(bands: SubbandSet, direction: str) -> ScanSequence:
    c, h2, w2 = bands.shape
    order = progressive_order(h2, w2, direction)
    return ScanSequence(take_rows(_bands_to_rows(bands), order), order, (c, h2, w2))


def interleaved_scan(bands: SubbandSet, direction: str) -> ScanSequence:
    c, h2, w2 = bands.shape
    order = interleaved_order(h2, w2, direction)
    return ScanSequence(take_rows(_bands_to_rows(bands), order), order, (c, h2, w2))


def inverse_scan(seq: ScanSequence) -> SubbandSet:
    inv = np.argsort(seq.order)
    return _rows_to_bands(take_rows(seq.values, inv), seq.band_shape)


class SelectiveScan(ParamBlock):
    """Input-conditioned diagonal linear recurrence over a token sequence.

    Per token: step = softplus(x W_step + b_step) per channel, input and
    output gates are linear in the token, decay is -exp(log_decay) per state.
    State update h_t = exp(step * decay) * h_{t-1} + step * gate_in * x_t;
    output y_t = sum_n gate_out * h_t + skip * x_t. Output projection starts
    at zero and skip at one, so the scan is the per-token identity at init.
    """

    def __init__(self, c: int, state_dim: int, rng: np.random.Generator, prefix: str):
        super().__init__()
        if state_dim < 1:
            raise ValueError(f"state_dim must be positive, got {state_dim}")
        self.c = c
        self.state_dim = state_dim
        self.w_step = self._p(f"{prefix}.w_step", np.zeros((c, c)))
        self.b_step = self._p(f"{prefix}.b_step", np.zeros((1, c)))
        self.w_in = self._p(f"{prefix}.w_in", 0.1 * rng.standard_normal((c, state_dim)))
        self.b_in = self._p(f"{prefix}.b_in", np.zeros((1, state_dim)))
        self.w_out = self._p(f"{prefix}.w_out", np.zeros((c, state_dim)))
        self.b_out = self._p(f"{prefix}.b_out", np.zeros((1, state_dim)))
        self.skip = self._p(f"{prefix}.skip", np.ones((1, c)))
        self.log_decay = self._p(f"{prefix}.log_decay",
                                 np.log(np.arange(1, state_dim + 1, dtype=np.float64)))

    @property
    def decay(self) -> np.ndarray:
        return -np.exp(self.log_decay.data)

    def recurrence_terms(self, values: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Decay factors, drive, and output gate for each token: (a, b, gate_out)."""
        if values.data.ndim != 2 or values.data.shape[0] == 0:
            raise ValueError(f"selective scan needs a nonempty LxC sequence, "
                             f"got {values.data.shape}")
        length, c = values.data.shape
        n = self.state_dim
        step = softplus(matmul(values, self.w_step) + self.b_step)        # L x C
        gate_in = matmul(values, self.w_in) + self.b_in                   # L x N
        gate_out = matmul(values, self.w_out) + self.b_out                # L x N
        decay = neg(exp(self.log_decay))                                  # N
        a = exp(reshape(step, (length, c, 1)) * reshape(decay, (1, 1, n)))
        drive = reshape(step * values, (length, c, 1)) * reshape(gate_in, (length, 1, n))
        return a, drive, gate_out

    def read_out(self, states: Tensor, gate_out: Tensor, values: Tensor) -> Tensor:
        length, c = values.data.shape
        y = tsum(states * reshape(gate_out, (length, 1, self.state_dim)), axis=2)
        return y + self.skip * values

    def __call__(self, values: Tensor) -> Tensor:
        a, drive, gate_out = self.recurrence_terms(values)
        return self.read_out(linear_recurrence(a, drive), gate_out, values)


_SCAN_PATHS = (("prog", "forward"), ("prog", "reverse"),
               ("inter", "forward"), ("inter", "reverse"))


class WaveletDenoiser(ParamBlock):
    """Sum of the global scan branch and the local nested-conv branch."""

    def __init__(self, c: int, state_dim: int, rng: np.random.Generator,
                 prefix: str = "denoise"):
        super().__init__()
        self.c = c
        self.scans = []
        for kind, direction in _SCAN_PATHS:
            s = SelectiveScan(c, state_dim, rng, prefix=f"{prefix}.ssm.{kind}.{direction}")
            self.scans.append(s)
            self.params.update(s.params)
        proj = np.eye(4 * c).reshape(4 * c, 4 * c, 1, 1) / 4.0
        proj += 0.01 * rng.standard_normal(proj.shape)
        self.proj_kernel = self._p(f"{prefix}.proj.kernel", proj)
        self.proj_bias = self._p(f"{prefix}.proj.bias", np.zeros((4 * c, 1, 1)))
        self.inner_kernel = self._p(f"{prefix}.local.inner.kernel",
                                    np.zeros((16 * c, 16 * c, 3, 3)))
        self.inner_bias = self._p(f"{prefix}.local.inner.bias", np.zeros((16 * c, 1, 1)))
        self.skip_kernel = self._p(f"{prefix}.local.skip.kernel",
                                   np.zeros((4 * c, 4 * c, 3, 3)))
        self.skip_bias = self._p(f"{prefix}.local.skip.bias", np.zeros((4 * c, 1, 1)))

    def scan_branch(self, bands: SubbandSet) -> Tensor:
        # the four recurrences share one batched scan call (axis 1 = path)
        seqs, terms = [], []
        for ssm, (kind, direction) in zip(self.scans, _SCAN_PATHS):
            seq = (progressive_scan if kind == "prog" else interleaved_scan)(bands, direction)
            seqs.append(seq)
            terms.append(ssm.recurrence_terms(seq.values))
        length, c, n = terms[0][0].data.shape
        unit = (length, 1, c, n)
        a = concat([reshape(t[0], unit) for t in terms], axis=1)
        drive = concat([reshape(t[1], unit) for t in terms], axis=1)
        states = linear_recurrence(a, drive)
        total = None
        for i, (ssm, seq) in enumerate(zip(self.scans, seqs)):
            h = reshape(narrow(states, 1, i, 1), (length, c, n))
            y = ssm.read_out(h, terms[i][2], seq.values)
            cat = subband_concat(inverse_scan(ScanSequence(y, seq.order, seq.band_shape)))
            total = cat if total is None else total + cat
        enhanced = conv2d(total, self.proj_kernel) + self.proj_bias
        return haar_iwt2d(subband_split(enhanced))

    def conv_branch(self, bands: SubbandSet) -> Tensor:
        c, h2, w2 = bands.shape
        if h2 % 2 or w2 % 2:
            raise ValueError(f"local branch needs even subband dims, got {h2}x{w2}")
        f_wt = subband_concat(bands)                                      # 4C x h2 x w2
        inner = subband_concat(haar_wt2d(f_wt))                           # 16C x h2/2 x w2/2
        inner = conv2d(inner, self.inner_kernel, pad=1) + self.inner_bias
        inner = haar_iwt2d(subband_split(inner))                          # 4C x h2 x w2
        skip = conv2d(f_wt, self.skip_kernel, pad=1) + self.skip_bias
        return haar_iwt2d(subband_split(inner + skip))                    # C x H x W

    def __call__(self, feature: Tensor) -> Tensor:
        _, h, w = feature.data.shape
        if h % 4 or w % 4:
            raise ValueError(f"denoiser needs H, W divisible by 4, got {h}x{w}")
        bands = haar_wt2d(feature)
        return self.scan_branch(bands) + self.conv_branch(bands)
