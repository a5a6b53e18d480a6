"""Parameter containers and initializers shared by the model modules."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, conv2d, matmul

__all__ = ["Module", "Conv", "Linear", "kaiming_normal"]


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Module:
    """Holds named parameters and child modules in registration order."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, Module] = {}

    def param(self, name: str, value, trainable: bool = True) -> Parameter:
        p = Parameter(name, value, trainable=trainable)
        self._params[name] = p
        return p

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, c in self._children.items():
            yield from c.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


class Conv(Module):
    """k x k convolution with bias, channels-last, 'same' padding."""

    def __init__(self, rng, cin: int, cout: int, k: int = 1, zero: bool = False, bias: float = 0.0):
        super().__init__()
        w = np.zeros((k, k, cin, cout)) if zero else kaiming_normal(rng, (k, k, cin, cout), k * k * cin)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.full(cout, bias))

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.weight, "same") + self.bias


class Linear(Module):
    def __init__(self, rng, din: int, dout: int, zero: bool = False, bias: float = 0.0, std: float | None = None):
        super().__init__()
        if zero:
            w = np.zeros((din, dout))
        elif std is not None:
            w = rng.normal(0.0, std, size=(din, dout))
        else:
            w = kaiming_normal(rng, (din, dout), din)
        self.weight = self.param("weight", w)
        self.bias = self.param("bias", np.full(dout, bias))

    def __call__(self, x) -> Tensor:
        return matmul(x, self.weight) + self.bias
