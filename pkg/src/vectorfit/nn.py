"""Tiny module system over :class:`Tensor`: parameter discovery, dense layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

# Canonical ordering of module tags and vector kinds, used for ids and ties.
TAG_ORDER = {"q": 0, "k": 1, "v": 2, "o": 3, "f1": 4, "f2": 5, "other": 6}
ATTENTION_TAGS = ("q", "k", "v", "o")
MLP_TAGS = ("f1", "f2")
KIND_ORDER = {"sigma": 0, "bias": 1}


class Module:
    """Base class. Tensors, sub-modules and lists of sub-modules assigned as
    attributes are discovered in assignment order."""

    # names of tensor attributes that are state but not parameters
    _buffers: tuple[str, ...] = ()

    def named_tensors(self, prefix: str = "", buffers: bool = True) -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if buffers or key not in self._buffers:
                    yield name, val
            elif isinstance(val, Module):
                yield from val.named_tensors(name + ".", buffers)
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, sub in enumerate(val):
                    yield from sub.named_tensors(f"{name}.{i}.", buffers)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return self.named_tensors(prefix, buffers=False)

    def modules(self) -> Iterator[Module]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for sub in val:
                    yield from sub.modules()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_tensors()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        own = dict(self.named_tensors())
        missing = set(own) - set(arrays)
        if missing:
            raise DimensionError(f"missing arrays: {sorted(missing)[:5]}")
        for name, t in own.items():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise DimensionError(f"array {name!r}: shape {src.shape} vs {t.shape}")
            t.data = np.array(src, dtype=t.dtype)

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def freeze(self) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = False


class Linear(Module):
    """Dense ``y = x W^T + b`` with W of shape (d_out, d_in)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, bias: bool = True,
                 dtype=np.float32, tag: str = "other", layer: int = 0):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (d_out, d_in)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, d_out).astype(dtype), requires_grad=True) if bias else None
        self.tag = tag
        self.layer = layer

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]

    def named_tensors(self, prefix: str = "", buffers: bool = True):
        yield f"{prefix}weight", self.weight
        if self.bias is not None:
            yield f"{prefix}bias", self.bias

    def __call__(self, x: Tensor) -> Tensor:
        return apply_rows(x, self.d_in, lambda h: _affine(h, T.transpose(self.weight), self.bias))

    def dense(self) -> tuple[np.ndarray, np.ndarray | None]:
        return self.weight.data, None if self.bias is None else self.bias.data


def _affine(h: Tensor, Wt: Tensor, b: Tensor | None) -> Tensor:
    y = T.matmul(h, Wt)
    return y if b is None else T.add(y, b)


def apply_rows(x: Tensor, d_in: int, fn) -> Tensor:
    """Apply a row-wise map to the last axis of a 2-D or 3-D input."""
    if x.shape[-1] != d_in:
        raise DimensionError(f"input feature dim {x.shape[-1]} does not match layer d_in {d_in}")
    if x.ndim == 2:
        return fn(x)
    lead = x.shape[:-1]
    y = fn(T.reshape(x, (-1, d_in)))
    return T.reshape(y, lead + (y.shape[-1],))


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, dtype=np.float32, std: float = 0.1):
        self.weight = Tensor((rng.standard_normal((n, dim)) * std).astype(dtype), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


def count_params(module: Module, trainable_only: bool = False) -> int:
    return sum(t.size for _, t in module.named_parameters() if t.requires_grad or not trainable_only)
