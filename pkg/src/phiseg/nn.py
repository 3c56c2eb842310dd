"""Minimal module system: parameter containers with train/eval modes."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    training = True

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, m in enumerate(value):
                    yield f"{name}.{i}", m

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 dilation: int = 1):
        if k % 2 == 0:
            raise T.ShapeError(f"kernel size must be odd, got {k}")
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = _param(rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=1,
                        padding=self.padding, dilation=self.dilation)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5):
        self.scale = _param(np.ones(c))
        self.shift = _param(np.zeros(c))
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.scale, self.shift, self.running_mean,
                             self.running_var, self.training, self.momentum, self.eps)


class ConvBNAct(Module):
    """conv -> batch norm -> leaky ReLU."""

    def __init__(self, cin, cout, k, rng, dilation=1, slope=0.01):
        self.conv = Conv2d(cin, cout, k, rng, dilation)
        self.bn = BatchNorm2d(cout)
        self.slope = slope

    def __call__(self, x):
        return T.leaky_relu(self.bn(self.conv(x)), self.slope)


class DoubleConv(Module):
    def __init__(self, cin, cout, rng, slope=0.01):
        self.c1 = ConvBNAct(cin, cout, 3, rng, slope=slope)
        self.c2 = ConvBNAct(cout, cout, 3, rng, slope=slope)

    def __call__(self, x):
        return self.c2(self.c1(x))
