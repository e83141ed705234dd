"""Parameter carrier and module container.

Activations flow through the layers as plain ndarrays; only trainable
weights are wrapped so they can carry a gradient buffer.
"""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np


class Tensor:
    """Dense array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data, grad=None):
        self.data = np.asarray(data)
        self.grad = grad
        if grad is not None and np.shape(grad) != self.data.shape:
            raise ValueError(f"gradient shape {np.shape(grad)} != data shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


class Module:
    """Tree of layers with named parameters and (non-trainable) buffers.

    Subclasses register children with :meth:`add`, trainable weights with
    :meth:`param` and state such as BN running statistics with :meth:`buffer`.
    """

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._buffers: OrderedDict[str, Tensor] = OrderedDict()
        self._children: OrderedDict[str, Module] = OrderedDict()

    def param(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data)
        self._params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data)
        self._buffers[name] = t
        return t

    def add(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._buffers.items():
            yield prefix + name, t
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state(self) -> OrderedDict[str, Tensor]:
        """Parameters followed by buffers, in a fixed traversal order."""
        out = OrderedDict(self.named_parameters())
        out.update(self.named_buffers())
        return out

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def astype(self, dtype) -> "Module":
        for t in self.state().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self
