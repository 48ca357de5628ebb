"""Squeeze-and-excitation blocks: channel (cSE), unary spatial and binary spatial."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Module, conv2d, parameter
from .tensor import mean, mul, relu, reshape, sigmoid


def spatial_attention(u, w_sq):
    """sigmoid(w_sq * u): a [N,1,H,W] map from a 1x1 squeeze over channels."""
    if w_sq.shape[0] != 1 or w_sq.shape[1] != u.shape[1] or w_sq.shape[2:] != (1, 1):
        raise DimensionError(f"squeeze kernel {w_sq.shape} does not fit input {u.shape}")
    return sigmoid(conv2d(u, w_sq))


def sse_unary(u, w_sq):
    return mul(u, spatial_attention(u, w_sq))


def sse_binary(u1, u2, w_sq):
    """Recalibrate ``u1`` with the attention map squeezed out of ``u2``."""
    if u1.shape[0] != u2.shape[0] or u1.shape[2:] != u2.shape[2:]:
        raise DimensionError(f"binary sSE inputs disagree on batch/spatial dims: {u1.shape} vs {u2.shape}")
    return mul(u1, spatial_attention(u2, w_sq))


def cse(u, w1, w2):
    """Channel SE: global average pool, bottleneck gate, rescale channels.

    ``w1`` is [C/r, C] and ``w2`` is [C, C/r].
    """
    n, c = u.shape[:2]
    if w1.shape[1] != c or w2.shape[0] != c:
        raise DimensionError(f"cSE weights {w1.shape}, {w2.shape} do not fit {c} channels")
    z = mean(u, axis=(2, 3))                         # [N, C]
    hidden = relu(_matmul_rows(z, w1))               # [N, C/r]
    s = sigmoid(_matmul_rows(hidden, w2))            # [N, C]
    return mul(u, reshape(s, (n, c, 1, 1)))


def _matmul_rows(x, w):
    # x [N, K] times w^T for w [M, K], routed through a 1x1 convolution
    n, k = x.shape
    out = conv2d(reshape(x, (n, k, 1, 1)), reshape(w, (w.shape[0], k, 1, 1)))
    return reshape(out, (n, w.shape[0]))


class SSE(Module):
    """Spatial SE with a bias-free 1x1 squeeze kernel, zero-initialised.

    A zero kernel makes the attention exactly 0.5 everywhere at start.
    """

    def __init__(self, channels):
        self.w_sq = parameter(np.zeros((1, channels, 1, 1)))

    def forward(self, u, squeeze_from=None):
        if squeeze_from is None:
            return sse_unary(u, self.w_sq)
        return sse_binary(u, squeeze_from, self.w_sq)


class CSE(Module):
    def __init__(self, channels, reduction=2, rng=None):
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"reduction ratio {reduction} must divide channel count {channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = channels // reduction
        self.w1 = parameter(rng.normal(0, np.sqrt(2.0 / channels), (hidden, channels)))
        self.w2 = parameter(rng.normal(0, np.sqrt(1.0 / hidden), (channels, hidden)))

    def forward(self, u):
        return cse(u, self.w1, self.w2)
