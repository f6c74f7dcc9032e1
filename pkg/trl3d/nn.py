"""
Parameter containers: a small module base class, affine layers and MLPs.
"""

from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .tensor import Rng, Tensor, linear, parameter, relu


class Module:
    """Owns named parameters, discovered from its attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{index}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    """Affine layer; weights uniform in +-1/sqrt(fan_in), biases zero."""

    def __init__(self, fan_in: int, fan_out: int, rng: Rng, zero: bool = False) -> None:
        bound = 1.0 / np.sqrt(fan_in)
        weight = np.zeros((fan_in, fan_out)) if zero else rng.uniform(-bound, bound, (fan_in, fan_out))
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(fan_out))

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Mlp(Module):
    """Stack of affine layers with ReLU between them (none after the last)."""

    def __init__(self, widths: Sequence[int], rng: Rng, zero_last: bool = False) -> None:
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least two widths, got {list(widths)}")
        count = len(widths) - 1
        self.layers = [
            Linear(widths[i], widths[i + 1], rng.child(i), zero=zero_last and i == count - 1)
            for i in range(count)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if index < len(self.layers) - 1:
                x = relu(x)
        return x
