"""Cross-branch fusion, regression heads and slide-level aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Linear, Module, uniform_param
from .tensor import Tensor


class CrossAttention(Module):
    """Single-query attention: the pooled cellular vector attends over global tokens."""

    def __init__(self, rng, dim: int, dtype=np.float32):
        self.w_q = uniform_param(rng, (dim, dim), dim, dtype)
        self.w_k = uniform_param(rng, (dim, dim), dim, dtype)
        self.w_v = uniform_param(rng, (dim, dim), dim, dtype)
        self.dim = dim

    def forward(self, f_cell: Tensor, f_global: Tensor) -> tuple[Tensor, Tensor]:
        """``f_cell`` (B, D) or (D,); ``f_global`` (B, N, D) or (N, D).

        Returns (F_fusion with the shape of ``f_cell``, weights (B, N) or (N,)).
        """
        if f_global.shape[-2] == 0:
            raise ValueError("cross-attention needs at least one global token")
        if f_cell.shape[-1] != f_global.shape[-1]:
            raise ValueError(f"dim mismatch: {f_cell.shape} vs {f_global.shape}")
        single = f_cell.ndim == 1
        if single:
            f_cell = T.reshape(f_cell, (1, -1))
            f_global = T.reshape(f_global, (1,) + f_global.shape)
        b, n, d = f_global.shape
        q = T.reshape(T.matmul(f_cell, self.w_q), (b, d, 1))
        k = T.matmul(f_global, self.w_k)
        v = T.matmul(f_global, self.w_v)
        scores = T.reshape(T.matmul(k, q), (b, 1, n)) * (1.0 / math.sqrt(d))
        weights = T.softmax(scores, axis=-1)
        fused = T.reshape(T.matmul(weights, v), (b, d))
        weights = T.reshape(weights, (b, n))
        if single:
            return T.reshape(fused, (d,)), T.reshape(weights, (n,))
        return fused, weights


class GatedFusion(Module):
    """g = sigmoid(W [f_fusion ; f_cell] + b); out = g*f_fusion + (1-g)*f_cell."""

    def __init__(self, rng, dim: int, dtype=np.float32):
        self.gate = Linear(rng, 2 * dim, dim, dtype=dtype)

    def forward(self, f_fusion: Tensor, f_cell: Tensor) -> Tensor:
        g = T.sigmoid(self.gate(T.concat([f_fusion, f_cell], axis=-1)))
        return g * f_fusion + (1.0 - g) * f_cell


class Regressor(Module):
    def __init__(self, rng, dim: int, hidden: int = 128, dtype=np.float32):
        self.fc1 = Linear(rng, dim, hidden, dtype=dtype)
        self.fc2 = Linear(rng, hidden, 1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.fc2(T.relu(self.fc1(x)))
        return T.sigmoid(T.reshape(y, y.shape[:-1]))


class SubScoreHead(Module):
    def __init__(self, rng, cell_dim: int, dtype=np.float32):
        self.fc = Linear(rng, cell_dim, 1, dtype=dtype)

    def forward(self, pooled: Tensor) -> Tensor:
        y = self.fc(pooled)
        return T.sigmoid(T.reshape(y, y.shape[:-1]))


def slide_score(patch_scores: Sequence[float]) -> float:
    """Slide-level score: arithmetic mean of the patch scores."""
    scores = [float(s) for s in patch_scores]
    if not scores:
        raise ValueError("slide_score needs at least one patch score")
    return math.fsum(scores) / len(scores)


@dataclass
class QualityReport:
    patch_id: str
    s_stain: float
    s_nuc: float
    s_mem: float
    usable: bool

    @classmethod
    def build(cls, patch_id: str, s_stain: float, s_nuc: float, s_mem: float, threshold: float = 0.5):
        for name, val in (("s_stain", s_stain), ("s_nuc", s_nuc), ("s_mem", s_mem)):
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name}={val} outside [0, 1]")
        return cls(patch_id, float(s_stain), float(s_nuc), float(s_mem), bool(s_stain >= threshold))
