"""Module tree and the plain (full-precision) layers."""
from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Named hierarchy of layers and parameters.

    Attributes that are ``Module`` instances become children, attributes that
    are ``Tensor`` instances with ``requires_grad`` become parameters. Order
    of assignment is kept, so traversal is deterministic.
    """

    def __init__(self):
        object.__setattr__(self, "_children", OrderedDict())
        object.__setattr__(self, "_params", OrderedDict())

    def __setattr__(self, name, value):
        children = self.__dict__.get("_children")
        if children is None:
            raise RuntimeError("Module.__init__ must run before assigning attributes")
        self._children.pop(name, None)
        self._params.pop(name, None)
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def named_children(self) -> Iterator[tuple[str, Module]]:
        yield from self._children.items()

    def children(self) -> Iterator[Module]:
        yield from self._children.values()

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self._children.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every parameter once, under the first name it is reached by."""
        seen: set[int] = set()
        for mname, mod in self.named_modules(prefix):
            for pname, p in mod._params.items():
                if id(p) in seen:
                    continue
                seen.add(id(p))
                yield (f"{mname}.{pname}" if mname else pname), p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._n = 0
        for m in modules:
            self.append(m)

    def append(self, m: Module) -> None:
        setattr(self, str(self._n), m)
        self._n += 1

    def __getitem__(self, i: int) -> Module:
        return getattr(self, str(range(self._n)[i]))

    def __len__(self) -> int:
        return self._n

    def __iter__(self):
        return (getattr(self, str(i)) for i in range(self._n))


def init_normal(shape, std: float, rng: np.random.Generator) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32), requires_grad=True)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored as ``[out, in]``."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, std: float | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        std = std if std is not None else 1.0 / np.sqrt(in_features)
        self.weight = init_normal((out_features, in_features), std, rng)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, ad.transpose(self.weight))
        if self.bias is not None:
            y = y + self.bias
        return y

    def __repr__(self) -> str:
        return f"Linear({self.in_features}, {self.out_features}, bias={self.bias is not None})"


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator | None = None, std: float = 1.0):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = init_normal((num, dim), std, rng)

    def forward(self, ids) -> Tensor:
        return ad.embedding_lookup(self.weight, ids)


class LayerNorm(Module):
    """Normalisation over the last axis with a learned gain (no shift)."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = Tensor(np.ones(dim, np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.eps) * self.weight


class GELU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.gelu(x)
