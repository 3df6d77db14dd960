"""Small layer library on top of :mod:`vdn.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Holds parameters and child modules in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Affine map; weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), bias zero."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.W = self.add_param("W", rng.uniform(-bound, bound, size=(n_in, n_out)))
        self.b = self.add_param("b", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 2:
            return ad.affine(x, self.W, self.b)
        return ad.matmul(x, self.W) + self.b


_ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "leaky_relu": ad.leaky_relu,
    "softplus": ad.softplus,
}


class MLP(Module):
    """Stack of Linear layers with an activation between them (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, activation: str = "relu"):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.act = _ACTIVATIONS[activation]
        self.layers = [
            self.add_child(f"fc{i}", Linear(a, b, rng))
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h


def one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
