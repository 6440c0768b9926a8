"""Orthonormal 2-D Haar analysis/synthesis on the last two axes.

Per 2x2 block ``(a b; c d)``::

    LL = (a + b + c + d) / 2     LH = (a + b - c - d) / 2
    HL = (a - b + c - d) / 2     HH = (a - b - c + d) / 2

The transform is orthonormal, so each direction's backward pass is the
other direction applied to the incoming gradient. Odd sizes are
reflect-padded by one row/column and cropped again on synthesis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

BANDS = ("ll", "lh", "hl", "hh")


def _analysis(x: np.ndarray) -> np.ndarray:
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    s1, d1 = a + b, a - b
    s2, d2 = c + d, c - d
    return np.stack([s1 + s2, s1 - s2, d1 + d2, d1 - d2], axis=-3) * 0.5


def _synthesis(s: np.ndarray) -> np.ndarray:
    ll, lh, hl, hh = (s[..., k, :, :] for k in range(4))
    p, q = ll + lh, ll - lh
    r, t = hl + hh, hl - hh
    *lead, h, w = ll.shape
    out = np.empty((*lead, 2 * h, 2 * w), dtype=s.dtype)
    out[..., 0::2, 0::2] = (p + r) * 0.5
    out[..., 0::2, 1::2] = (p - r) * 0.5
    out[..., 1::2, 0::2] = (q + t) * 0.5
    out[..., 1::2, 1::2] = (q - t) * 0.5
    return out


def _pad_even(x: np.ndarray) -> tuple[np.ndarray, tuple[int, int], bool]:
    h, w = x.shape[-2:]
    ph, pw = h % 2, w % 2
    reflect = min(h, w) > 1
    if not (ph or pw):
        return x, (0, 0), reflect
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, widths, mode="reflect" if reflect else "edge"), (ph, pw), reflect


def _unpad_grad(g: np.ndarray, pad: tuple[int, int], reflect: bool) -> np.ndarray:
    ph, pw = pad
    # the padded row/column is a copy of index -2 (reflect) or -1 (edge) of the original
    src = -3 if reflect else -2
    if pw:
        g = g.copy()
        g[..., src] += g[..., -1]
        g = g[..., :-1]
    if ph:
        g = g.copy()
        g[..., src, :] += g[..., -1, :]
        g = g[..., :-1, :]
    return g


def haar_analysis(x: Tensor) -> tuple[Tensor, tuple[int, int]]:
    """Stacked sub-bands of shape (..., 4, H/2, W/2) in LL, LH, HL, HH order."""
    if x.size == 0:
        raise ValueError("cannot transform an empty tensor")
    if x.ndim < 2:
        raise ValueError("need at least two spatial axes")
    xp, pad, reflect = _pad_even(x.data)

    def backward(g):
        return (_unpad_grad(_synthesis(g), pad, reflect),)

    return T.make_result(_analysis(xp), (x,), backward), pad


def haar_synthesis(stacked: Tensor, pad: tuple[int, int] = (0, 0)) -> Tensor:
    """Inverse of :func:`haar_analysis`; crops the reflect pad if one was added."""
    if stacked.ndim < 3 or stacked.shape[-3] != 4:
        raise ValueError(f"expected (..., 4, h, w) stacked bands, got {stacked.shape}")
    ph, pw = pad
    full = _synthesis(stacked.data)
    h, w = full.shape[-2] - ph, full.shape[-1] - pw
    out = full[..., :h, :w]

    def backward(g):
        if ph or pw:
            gf = np.zeros_like(full)
            gf[..., :h, :w] = g
            g = gf
        return (_analysis(g),)

    return T.make_result(np.ascontiguousarray(out), (stacked,), backward)


@dataclass
class SubBands:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    pad: tuple[int, int] = (0, 0)

    def __post_init__(self):
        shapes = {self.ll.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise ValueError(f"sub-band shapes disagree: {sorted(shapes)}")

    def bands(self) -> list[Tensor]:
        return [self.ll, self.lh, self.hl, self.hh]


def dwt2(x: Tensor) -> SubBands:
    st, pad = haar_analysis(x)
    return SubBands(*(st[..., k, :, :] for k in range(4)), pad=pad)


def idwt2(b: SubBands) -> Tensor:
    return haar_synthesis(T.stack(b.bands(), axis=-3), b.pad)


@dataclass
class WaveletPyramid:
    levels: list[SubBands]
    ll: Tensor

    def coefficients(self) -> list[Tensor]:
        """Every W_{j,k}: detail bands of each level, then the final LL."""
        out = [band for lvl in self.levels for band in (lvl.lh, lvl.hl, lvl.hh)]
        out.append(self.ll)
        return out


def wavelet_pyramid(x: Tensor, levels: int) -> WaveletPyramid:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = []
    cur = x
    for j in range(levels):
        h, w = cur.shape[-2:]
        if min(h, w) < 2:
            raise ValueError(f"{levels} levels too deep for spatial size {x.shape[-2:]} (level {j + 1} sees {h}x{w})")
        sb = dwt2(cur)
        out.append(sb)
        cur = sb.ll
    return WaveletPyramid(out, cur)
