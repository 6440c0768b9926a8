"""Bidirectional WKV token mixing in O(n) time, plus Q-shift.

For token t and channel c (decay ``w >= 0``, self bonus ``u``)::

    wkv_t = (sum_{i!=t} e^{k_i - w|t-i|} v_i + e^{u+k_t} v_t)
            / (sum_{i!=t} e^{k_i - w|t-i|}     + e^{u+k_t})

i.e. a softmax-weighted average of the values. The fast path runs one
forward and one backward decayed scan, each carrying a running maximum
exponent so nothing overflows; the gradient is computed with the matching
adjoint scans. :func:`wkv_reference` is the O(n^2) direct sum built from
ordinary autodiff ops and serves as the oracle.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, const_param, uniform_param
from .tensor import Tensor

_NEG = -1e300


def _decayed_scan(k, v, w, reverse):
    """Exclusive decayed sums of e^{k_i} v_i and e^{k_i} (plus distance-weighted twins).

    Returns arrays (a, b, ga, gb, p) with the true sums equal to ``x * e^p``.
    """
    n = k.shape[0]
    rest = k.shape[1:]
    a = np.zeros(rest)
    b = np.zeros(rest)
    ga = np.zeros(rest)
    gb = np.zeros(rest)
    p = np.full(rest, _NEG)
    A, B, GA, GB, P = (np.empty(k.shape) for _ in range(5))
    for t in (range(n - 1, -1, -1) if reverse else range(n)):
        A[t], B[t], GA[t], GB[t], P[t] = a, b, ga, gb, p
        kt = k[t]
        q = np.maximum(p, kt)
        e1 = np.exp(p - q)
        e2 = np.exp(kt - q)
        ev = e2 * v[t]
        ga = e1 * (ga + a) + ev
        gb = e1 * (gb + b) + e2
        a = e1 * a + ev
        b = e1 * b + e2
        p = q - w
    return A, B, GA, GB, P


def _adjoint_scan(c, e, lam, w, reverse):
    """Exclusive decayed sums of c_t e^{lam_t} and e_t e^{lam_t}, scaled by e^q."""
    n = c.shape[0]
    rest = c.shape[1:]
    rc = np.zeros(rest)
    re = np.zeros(rest)
    q = np.full(rest, _NEG)
    RC, RE, Q = (np.empty(c.shape) for _ in range(3))
    for i in (range(n - 1, -1, -1) if reverse else range(n)):
        RC[i], RE[i], Q[i] = rc, re, q
        li = lam[i]
        qn = np.maximum(q, li)
        e1 = np.exp(q - qn)
        e2 = np.exp(li - qn)
        rc = e1 * rc + e2 * c[i]
        re = e1 * re + e2 * e[i]
        q = qn - w
    return RC, RE, Q


def wkv(k: Tensor, v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """Linear-time bidirectional WKV over axis -2 of ``k``/``v`` (shape (..., n, D)).

    ``w`` (effective decay, >= 0) and ``u`` have shape (D,). Accumulation is
    float64 regardless of input precision.
    """
    if k.shape != v.shape:
        raise ValueError(f"k/v shapes differ: {k.shape} vs {v.shape}")
    if k.ndim < 2 or k.shape[-2] < 1:
        raise ValueError("wkv needs at least one token")
    out_dtype = v.dtype
    kk = np.moveaxis(k.data.astype(np.float64), -2, 0)
    vv = np.moveaxis(v.data.astype(np.float64), -2, 0)
    ww = w.data.astype(np.float64)
    uu = u.data.astype(np.float64)
    if (ww < 0).any():
        raise ValueError("decay must be non-negative")

    af, bf, gaf, gbf, pf = _decayed_scan(kk, vv, ww, reverse=False)
    ab, bb, gab, gbb, pb = _decayed_scan(kk, vv, ww, reverse=True)
    s = uu + kk
    m = np.maximum(np.maximum(pf, pb), s)
    ef = np.exp(pf - m)
    eb = np.exp(pb - m)
    es = np.exp(s - m)
    num = af * ef + ab * eb + vv * es
    den = bf * ef + bb * eb + es
    y = num / den
    log_den = m + np.log(den)
    if not np.isfinite(y).all():
        raise FloatingPointError("non-finite WKV output (stabilization failure)")

    def backward(g):
        g = np.moveaxis(g.astype(np.float64), -2, 0)
        red = tuple(range(g.ndim - 1))
        sig = np.exp(s - log_den)
        diff = vv - y
        dk = sig * g * diff
        du = dk.sum(axis=red)
        dv = sig * g
        lam = -log_den
        ge = g * y
        dwt = -(g * ((gaf - y * gbf) * np.exp(pf - log_den) + (gab - y * gbb) * np.exp(pb - log_den)))
        dw = dwt.sum(axis=red)
        for reverse in (False, True):
            rc, re, q = _adjoint_scan(g, ge, lam, ww, reverse)
            f = np.exp(q + kk)
            cv = rc * f
            dv = dv + cv
            dk = dk + vv * cv - re * f
        back = lambda arr: np.moveaxis(arr, 0, -2).astype(out_dtype)
        return back(dk), back(dv), dw.astype(w.dtype), du.astype(u.dtype)

    return T.make_result(np.moveaxis(y, 0, -2).astype(out_dtype), (k, v, w, u), backward)


def wkv_reference(k: Tensor, v: Tensor, w: Tensor, u: Tensor) -> Tensor:
    """O(n^2) direct-sum WKV: explicit softmax over every (t, i) pair."""
    n = k.shape[-2]
    idx = np.arange(n)
    dist = np.abs(idx[:, None] - idx[None, :]).astype(k.dtype)
    eye = np.eye(n, dtype=k.dtype)
    logits = (
        T.reshape(k, k.shape[:-2] + (1, n, k.shape[-1]))
        - Tensor(dist[:, :, None]) * w
        + Tensor(eye[:, :, None]) * u
    )
    weights = T.softmax(logits, axis=-2)
    return T.tsum(weights * T.reshape(v, v.shape[:-2] + (1, n, v.shape[-1])), axis=-2)


def q_shift(tokens: Tensor, grid: tuple[int, int]) -> Tensor:
    """Quarter-channel one-pixel shifts on a row-major token grid.

    Channel groups 0..3 take their value from the right, left, lower and
    upper neighbour respectively (content moves left, right, up, down);
    vacated positions are zero.
    """
    h, w = grid
    *lead, n, d = tokens.shape
    if n != h * w:
        raise ValueError(f"{n} tokens do not fill a {h}x{w} grid")
    if d % 4:
        raise ValueError(f"channel dim {d} not divisible by 4")
    q = d // 4
    x = tokens.data.reshape(*lead, h, w, d)

    def shift(src, sign):
        out = np.zeros_like(src)
        # sign=+1 applies the forward shift, -1 its adjoint
        if sign > 0:
            out[..., :, :-1, 0:q] = src[..., :, 1:, 0:q]
            out[..., :, 1:, q:2 * q] = src[..., :, :-1, q:2 * q]
            out[..., :-1, :, 2 * q:3 * q] = src[..., 1:, :, 2 * q:3 * q]
            out[..., 1:, :, 3 * q:] = src[..., :-1, :, 3 * q:]
        else:
            out[..., :, 1:, 0:q] = src[..., :, :-1, 0:q]
            out[..., :, :-1, q:2 * q] = src[..., :, 1:, q:2 * q]
            out[..., 1:, :, 2 * q:3 * q] = src[..., :-1, :, 2 * q:3 * q]
            out[..., :-1, :, 3 * q:] = src[..., 1:, :, 3 * q:]
        return out

    def backward(g):
        return (shift(g.reshape(*lead, h, w, d), -1).reshape(tokens.shape),)

    return T.make_result(shift(x, +1).reshape(tokens.shape), (tokens,), backward, check=False)


class BiWKV(Module):
    """r/k/v projections, bidirectional WKV, receptance gate and output projection.

    The decay is stored pre-softplus so the effective value stays >= 0.
    """

    def __init__(self, rng, dim: int, dtype=np.float32):
        self.w_r = uniform_param(rng, (dim, dim), dim, dtype)
        self.w_k = uniform_param(rng, (dim, dim), dim, dtype)
        self.w_v = uniform_param(rng, (dim, dim), dim, dtype)
        self.w_out = uniform_param(rng, (dim, dim), dim, dtype)
        self.decay = const_param(0.5, (dim,), dtype)
        self.bonus = const_param(0.0, (dim,), dtype)
        self.dim = dim

    def effective_decay(self) -> Tensor:
        return T.softplus(self.decay)

    def forward(self, x: Tensor, reference: bool = False) -> Tensor:
        r = T.matmul(x, self.w_r)
        k = T.matmul(x, self.w_k)
        v = T.matmul(x, self.w_v)
        mix = wkv_reference if reference else wkv
        y = mix(k, v, self.effective_decay(), self.bonus)
        return T.matmul(T.sigmoid(r) * y, self.w_out)
