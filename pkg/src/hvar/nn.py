"""Parameters, a small module tree, and the layers the models are built from."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor. ``trainable=False`` freezes it."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


class Module:
    """Container that discovers parameters and submodules through its attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict, prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing tensor {key!r} in state")
            arr = np.asarray(state[key], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"load {key}", p.shape, arr.shape)
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> np.ndarray:
    bound = gain / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        self.weight = Parameter(_fan_in_uniform(rng, (d_out, d_in), d_in, init_scale))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, init_scale: float = 1.0):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(_fan_in_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, init_scale))
        self.bias = Parameter(np.zeros(c_out))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-6):
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = Parameter(rng.normal(0.0, std, size=(count, dim)))

    def forward(self, index):
        return T.embed_lookup(self.weight, index)


def assign_names(module: Module) -> None:
    """Stamp each parameter with its dotted attribute path."""
    for name, p in module.named_parameters():
        p.name = name
