"""Global difference-perception branch.

stem conv -> WCG (Y1, full res) -> 2x avg pool -> WCG (Y2, half res)
-> AFFM fusion to D channels on the half-res grid -> row-major tokens
-> layer norm + Q-shift -> Bi-WKV (residual) -> F_Global.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Conv2d, LayerNorm, Module
from .tensor import Tensor
from .wavelet import haar_analysis, haar_synthesis
from .wkv import BiWKV, q_shift


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


class WCGBlock(Module):
    """Wavelet-convolutional group: DWT, per-band depthwise 3x3 + per-band
    pointwise mix (+ReLU), inverse DWT, residual add."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        c4 = 4 * channels
        self.depthwise = Conv2d(rng, c4, c4, 3, padding=1, groups=c4, dtype=dtype, bias=False)
        self.pointwise = Conv2d(rng, c4, c4, 1, groups=4, dtype=dtype)
        self.channels = channels
        self.activation = True

    def forward(self, x: Tensor) -> Tensor:
        xb, squeeze = _batched(x)
        n, c, h, w = xb.shape
        st, pad = haar_analysis(xb)                          # (n, c, 4, h/2, w/2)
        hh, ww = st.shape[-2:]
        bands = T.reshape(T.transpose(st, (0, 2, 1, 3, 4)), (n, 4 * c, hh, ww))
        y = self.pointwise(self.depthwise(bands))
        if self.activation:
            y = T.relu(y)
        y = T.transpose(T.reshape(y, (n, 4, c, hh, ww)), (0, 2, 1, 3, 4))
        out = haar_synthesis(y, pad) + xb
        return T.reshape(out, out.shape[1:]) if squeeze else out


class ConvBlock(Module):
    """Plain 3x3 conv + ReLU with residual; stands in for WCG when it is ablated."""

    def __init__(self, rng, channels: int, dtype=np.float32):
        self.conv = Conv2d(rng, channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv(x)) + x


class AFFM(Module):
    """Asymmetric fusion of two scales: (1x3 -> 3x1 -> ReLU) per scale, nearest
    upsample of the coarse map, sum, 1x1 projection, 2x2 average pool."""

    def __init__(self, rng, channels: int, dim: int, dtype=np.float32):
        self.fine_h = Conv2d(rng, channels, channels, (1, 3), padding=(0, 1), dtype=dtype)
        self.fine_v = Conv2d(rng, channels, channels, (3, 1), padding=(1, 0), dtype=dtype)
        self.coarse_h = Conv2d(rng, channels, channels, (1, 3), padding=(0, 1), dtype=dtype)
        self.coarse_v = Conv2d(rng, channels, channels, (3, 1), padding=(1, 0), dtype=dtype)
        self.proj = Conv2d(rng, channels, dim, 1, dtype=dtype)

    def forward(self, y1: Tensor, y2: Tensor) -> Tensor:
        a = T.relu(self.fine_v(self.fine_h(y1)))
        b = T.relu(self.coarse_v(self.coarse_h(y2)))
        fused = a + T.upsample_nearest2d(b, 2)
        return T.avg_pool2d(self.proj(fused), 2)


def tokens_from_map(fmap: Tensor) -> Tensor:
    """(N, D, h, w) -> (N, h*w, D), row-major over the grid."""
    n, d, h, w = fmap.shape
    return T.reshape(T.transpose(fmap, (0, 2, 3, 1)), (n, h * w, d))


class GlobalStream(Module):
    def __init__(self, rng, channels: int = 16, dim: int = 256, use_wcg: bool = True, dtype=np.float32):
        if dim % 4:
            raise ValueError("hidden dim must be divisible by 4 for Q-shift")
        block = WCGBlock if use_wcg else ConvBlock
        self.stem = Conv2d(rng, 3, channels, 3, padding=1, dtype=dtype)
        self.stage1 = block(rng, channels, dtype=dtype)
        self.stage2 = block(rng, channels, dtype=dtype)
        self.affm = AFFM(rng, channels, dim, dtype=dtype)
        self.norm = LayerNorm(dim, dtype=dtype)
        self.mix = BiWKV(rng, dim, dtype=dtype)
        self.recon = Conv2d(rng, channels, 3, 1, dtype=dtype)
        self.dim = dim

    def forward(self, images: Tensor) -> dict:
        """``images``: (N, 3, H, W) with H, W divisible by 4."""
        xb, squeeze = _batched(images)
        h, w = xb.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"patch size {h}x{w} must be divisible by 4")
        # centre [0, 1] intensities around zero before the stem
        x = self.stem((xb - 0.5) * 2.0)
        y1 = self.stage1(x)
        y2 = self.stage2(T.avg_pool2d(y1, 2))
        f_diff = self.affm(y1, y2)
        grid = (h // 2, w // 2)
        tokens = tokens_from_map(f_diff)
        shifted = q_shift(self.norm(tokens), grid)
        f_global = tokens + self.mix(shifted)
        out = {
            "f_difference": f_diff,
            "f_global": f_global,
            "recon": self.recon(y1),
            "grid": grid,
        }
        if squeeze:
            out = {k: (T.reshape(v, v.shape[1:]) if isinstance(v, Tensor) else v) for k, v in out.items()}
        return out
