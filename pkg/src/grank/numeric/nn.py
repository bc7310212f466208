"""Parameter containers: Linear, MLP, LayerNorm and a tiny Module base."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from ..errors import DimensionError
from . import ops
from .tensor import Parameter, Tensor, get_dtype


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


class Module:
    """Collects Parameters from attributes, lists and nested modules in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters(prefix)}

    def cast(self, dtype) -> None:
        for p in self.parameters():
            p.cast(dtype)


def _walk(value, name):
    if isinstance(value, Parameter):
        value.name = name
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros((1, out_dim), dtype=get_dtype())) if bias else None

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, self.weight)
        if self.bias is not None:
            out = ops.add(out, self.bias)
        return out


def mlp_forward(x: Tensor, layers: Sequence[tuple[Parameter, Parameter, str]]) -> Tensor:
    """Apply ``activation(x @ weight + bias)`` for each layer in turn."""
    for weight, bias, activation in layers:
        if x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"mlp_forward: input width {x.shape[-1]} does not match weight {weight.shape}")
        x = ops.matmul(x, weight)
        if bias is not None:
            x = ops.add(x, bias)
        x = ops.ACTIVATIONS[activation](x)
    return x


class MLP(Module):
    """Feed-forward stack; hidden layers use ``activation``, the last uses ``out_activation``."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (),
        activation: str = "gelu",
        out_activation: str = "identity",
    ):
        for act in (activation, out_activation):
            if act not in ops.ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        dims = [in_dim, *hidden, out_dim]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activations = [activation] * (len(dims) - 2) + [out_activation]

    @property
    def in_dim(self):
        return self.layers[0].in_dim

    @property
    def out_dim(self):
        return self.layers[-1].out_dim

    def spec(self):
        return [(layer.weight, layer.bias, act) for layer, act in zip(self.layers, self.activations)]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(x, self.spec())


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones((1, dim), dtype=get_dtype()))
        self.bias = Parameter(np.zeros((1, dim), dtype=get_dtype()))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)
