"""Minimal module/parameter registry the network layers are built on.

A `Module` auto-registers `Parameter`, `Module`, and `ModuleList` attributes
on assignment, exposes them through `named_parameters`/`named_buffers`, and
carries a training/eval flag that batch normalization consults. Calling a
module pushes its registered name onto the cost-profiling scope stack so
per-layer cost reports key rows by attribute path.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import costs
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor registered as trainable state of a module."""

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data), dtype=dtype, requires_grad=True)


class Module:
    """Base class for layers and blocks."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "_name", self.__class__.__name__)
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
            value._name = key
        elif isinstance(value, ModuleList):
            self._children[key] = value
            value._rename(key)
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        """Track a non-trainable array (e.g. running statistics) as state."""
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        if key not in self._buffers:
            raise KeyError(f"unknown buffer {key!r}")
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    # -- traversal ----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            yield f"{prefix}{key}", p
        for key, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffers:
            yield f"{prefix}{key}", getattr(self, key)
        for key, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{key}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, child in self._children.items():
            yield from child.named_modules(f"{prefix}{key}.")

    def named_state(self) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters and buffers together, in deterministic walk order."""
        for name, p in self.named_parameters():
            yield name, p.data
        for name, b in self.named_buffers():
            yield name, b

    # -- mode and gradients -------------------------------------------------

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- invocation ---------------------------------------------------------

    def __call__(self, *args, **kwargs):
        with costs.scope(self._name):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


class ModuleList:
    """Ordered container of child modules, registered under their index."""

    def __init__(self, modules=()):
        self._name = ""
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        module._name = self._child_name(len(self._items))
        self._items.append(module)

    def _child_name(self, i: int) -> str:
        return f"{self._name}.{i}" if self._name else str(i)

    def _rename(self, name: str) -> None:
        self._name = name
        for i, m in enumerate(self._items):
            m._name = self._child_name(i)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def train(self, mode: bool = True) -> "ModuleList":
        for m in self._items:
            m.train(mode)
        return self

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_buffers(f"{prefix}{i}.")

    def named_modules(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_modules(f"{prefix}{i}.")
