"""Parameter containers and the small layer set the model is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Attribute-based parameter registry.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    and lists of modules are walked recursively in attribute-definition order,
    which makes parameter names stable across runs.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    s = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(dtype), requires_grad=True)


def const_param(value: float, shape, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in, dtype)
        self.bias = const_param(0.0, (d_out,), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight) if x.ndim >= 2 else T.matmul(x.reshape(1, -1), self.weight).reshape(-1)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, padding=0, groups=1, dtype=np.float32, bias=True):
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = (c_in // groups) * kh * kw
        self.weight = uniform_param(rng, (c_out, c_in // groups, kh, kw), fan_in, dtype)
        self.bias = const_param(0.0, (c_out,), dtype) if bias else None
        self.padding = padding
        self.groups = groups

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = const_param(1.0, (dim,), dtype)
        self.beta = const_param(0.0, (dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)
