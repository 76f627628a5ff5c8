"""Module tree, parameter naming and the basic layers built on ``tensor``."""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Parameter container with torch-like attribute registration.

    Parameters and child modules are discovered through attribute
    assignment, in assignment order, which fixes both checkpoint order and
    the order in which RNG draws happen.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            full = f"{prefix}{name}"
            p.name = full
            yield full, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(T.get_default_dtype())


class Linear(Module):
    """Dense layer, weight stored (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        if zero_init:
            w = np.zeros((in_features, out_features), dtype=T.get_default_dtype())
        else:
            w = _normal(rng, (in_features, out_features), 1.0 / math.sqrt(in_features))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features), no_decay=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.weight = Parameter(np.ones(dim), no_decay=True)
        self.bias = Parameter(np.zeros(dim), no_decay=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Conv3d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride=1, padding=None, groups: int = 1,
                 bias: bool = True, zero_init: bool = False):
        super().__init__()
        self.stride, self.padding, self.groups = stride, padding, groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size, kernel_size)
        if zero_init:
            w = np.zeros(shape, dtype=T.get_default_dtype())
        else:
            fan_in = (in_channels // groups) * kernel_size ** 3
            w = _normal(rng, shape, 1.0 / math.sqrt(fan_in))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_channels), no_decay=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class MLP(Module):
    """Two dense layers with a GELU in between."""

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 rng: np.random.Generator, zero_init_out: bool = False,
                 out_bias: Optional[np.ndarray] = None):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng, zero_init=zero_init_out)
        if out_bias is not None:
            self.fc2.bias.data = np.asarray(out_bias, dtype=self.fc2.bias.dtype).reshape(out_features).copy()

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))
