"""Training objective: regression, pairwise difference, wavelet fidelity and
aggregation-consistency terms combined with fixed weights."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .cellular import AggrRWKV, CellEmbeddings
from .config import LossWeights
from .tensor import Tensor
from .wavelet import wavelet_pyramid


def _zero(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((), dtype=dtype))


def loss_reg(s: Tensor, s_star) -> Tensor:
    """Mean absolute error between predicted and reference scores."""
    target = Tensor(np.asarray(s_star, dtype=s.dtype).reshape(s.shape))
    return T.mean(T.tabs(s - target))


def diff_pairs(n: int, rng: np.random.Generator) -> np.ndarray:
    """Disjoint pairs (2m, 2m+1) of a random permutation; an odd leftover is dropped."""
    perm = rng.permutation(n)
    m = n // 2
    return perm[: 2 * m].reshape(m, 2)


def loss_diff(s: Tensor, s_star, pairs: np.ndarray) -> Tensor:
    """Mean over pairs of | |S*_i - S*_j| - |S_i - S_j| |."""
    if len(pairs) == 0:
        return _zero(s.dtype)
    target = np.asarray(s_star, dtype=np.float64)
    i, j = pairs[:, 0], pairs[:, 1]
    d = Tensor(np.abs(target[i] - target[j]).astype(s.dtype))
    pred = T.tabs(T.getitem(s, i) - T.getitem(s, j))
    return T.mean(T.tabs(d - pred))


def loss_wavelet(image, recon: Tensor, levels: int = 2) -> Tensor:
    """Sum over pyramid bands (details of every level plus the final LL) of the
    mean absolute coefficient difference between ``image`` and ``recon``."""
    image = T.as_tensor(image, dtype=recon.dtype)
    if image.shape != recon.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {recon.shape}")
    # the pyramid is linear, so one transform of the residual suffices
    pyr = wavelet_pyramid(recon - image, levels)
    total = None
    for band in pyr.coefficients():
        term = T.mean(T.tabs(band))
        total = term if total is None else total + term
    return total


def loss_aggr(emb: CellEmbeddings, aggr: AggrRWKV, rng: np.random.Generator, canonical: Tensor | None = None) -> Tensor:
    """Mean |aggr(tokens) - aggr(permuted tokens)| for one random permutation."""
    if emb.count == 0:
        return _zero(aggr.proj.weight.dtype)
    perm = rng.permutation(2 * emb.count)
    base = canonical if canonical is not None else aggr(emb)
    return T.mean(T.tabs(base - aggr(emb, perm=perm)))


def total_loss(
    l_reg: Tensor,
    l_diff: Tensor | None,
    l_wavelet: Tensor | None,
    l_aggr: Tensor | None,
    weights: LossWeights,
    l_sub: Tensor | None = None,
) -> Tensor:
    """L_reg + lambda1 L_diff + lambda2 L_wavelet + lambda3 L_Aggr (+ sub-score term).

    A term passed as ``None`` is disabled and contributes nothing.
    """
    total = l_reg
    for term, lam in ((l_diff, weights.lambda1), (l_wavelet, weights.lambda2), (l_aggr, weights.lambda3), (l_sub, weights.lambda_sub)):
        if term is not None and lam != 0:
            total = total + term * lam
    return total
