"""Minimal module system: named parameter trees over autodiff tensors."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError


class Module:
    """Base class; parameters are discovered by walking attributes.

    Attributes holding a :class:`Tensor` with ``requires_grad`` are
    parameters, attributes holding a :class:`Module` (or a list of them) are
    submodules.  Names are dotted paths in attribute-definition order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                yield from _walk_sequence(value, name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _walk_sequence(items, name: str):
    for i, item in enumerate(items):
        if isinstance(item, Module):
            yield from item.named_parameters(f"{name}.{i}.")
        elif isinstance(item, (list, tuple)):
            yield from _walk_sequence(item, f"{name}.{i}")


def param(value: np.ndarray) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)


class Linear(Module):
    """``y = x W + b`` with Glorot-uniform weights."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (n_in + n_out))
        self.weight = param(rng.uniform(-limit, limit, size=(n_in, n_out)))
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        if self.bias is not None:
            y = ad.add(y, self.bias)
        return y


class MLP(Module):
    """Stack of linear layers with SiLU between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.silu(x)
        return x
