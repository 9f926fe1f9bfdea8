"""Parameter containers on top of the tensor ops."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import BatchNormState, ConvSpec, Tensor, batch_norm, conv2d, deconv2d


class Module:
    """Walks its attributes to find parameters, BN states and submodules."""

    def named_children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{key}.{i}", item
            else:
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in self.named_children():
            name = prefix + key
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")

    def named_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for key, value in self.named_children():
            name = prefix + key
            if isinstance(value, BatchNormState):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_states(name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Conv(Module):
    """A conv (or stride-2 transposed conv) layer with bias."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator, std: float = 0.001,
                 transposed: bool = False, bias: bool = True):
        self.spec = spec
        self.transposed = transposed
        if transposed:
            shape = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w)
        else:
            shape = (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w)
        self.weight = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)
        self.bias = Tensor(np.zeros(spec.out_channels), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        op = deconv2d if self.transposed else conv2d
        return op(x, self.weight, self.bias, self.spec)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.state = BatchNormState.fresh(channels, momentum, eps)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, mode)
