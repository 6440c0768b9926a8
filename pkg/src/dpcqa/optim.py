"""Adam with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam over a fixed, named parameter set.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` alongside the
    bias-corrected Adam update. A step with any non-finite gradient is
    refused and leaves parameters and moments untouched.
    """

    def __init__(self, named_params, state: AdamState | None = None):
        self.params: dict[str, Tensor] = dict(named_params)
        self.state = state or AdamState()
        for name, p in self.params.items():
            self.state.m.setdefault(name, np.zeros_like(p.data))
            self.state.v.setdefault(name, np.zeros_like(p.data))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        bad = [n for n, p in self.params.items() if p.grad is not None and not np.isfinite(p.grad).all()]
        if bad:
            raise FloatingPointError(f"non-finite gradients, step aborted: {bad[:5]}")
        st.t += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.t
        c2 = 1.0 - b2 ** st.t
        for name, p in self.params.items():
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
            m = st.m[name]
            v = st.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + st.eps)
            p.data = (p.data - st.lr * update - st.lr * st.weight_decay * p.data).astype(p.dtype, copy=False)
