"""Linear layers held in factored form: frozen singular bases, trainable
singular values and bias."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DimensionError, ValidationError
from .linalg import SVDFactors, svd_thin
from .nn import Linear, Module, TAG_ORDER, apply_rows
from .tensor import Tensor


class SpectralLinear(Module):
    """``y = U diag(sigma) V^T x + b`` evaluated as ``U (sigma * (V^T x)) + b``.

    ``U`` and ``V`` never require grad. ``sigma0``/``bias0`` hold the values
    right after decomposition and are not parameters.
    """

    _buffers = ("sigma0", "bias0")

    def __init__(self, factors: SVDFactors, bias: np.ndarray, *, layer: int = 0, tag: str = "other"):
        dtype = factors.U.dtype
        self.U = Tensor(factors.U.copy(), name="U")
        self.V = Tensor(factors.V.copy(), name="V")
        self.sigma = Tensor(factors.sigma.astype(dtype, copy=True), requires_grad=True, name="sigma")
        self.bias = Tensor(np.asarray(bias, dtype=dtype).copy(), requires_grad=True, name="bias")
        self.sigma0 = Tensor(self.sigma.data.copy(), name="sigma0")
        self.bias0 = Tensor(self.bias.data.copy(), name="bias0")
        self.layer = layer
        self.tag = tag
        # optional transform of sigma during training (singular-value dropout)
        self.sigma_transform: Callable[[Tensor], Tensor] | None = None

    @property
    def id(self) -> tuple[int, str]:
        return (self.layer, self.tag)

    @property
    def d_in(self) -> int:
        return self.V.shape[0]

    @property
    def d_out(self) -> int:
        return self.U.shape[0]

    @property
    def rank_dim(self) -> int:
        return self.sigma.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return apply_rows(x, self.d_in, self._rows)

    def _rows(self, x: Tensor) -> Tensor:
        s = self.sigma if self.sigma_transform is None else self.sigma_transform(self.sigma)
        h = T.matmul(x, self.V)          # batch x r
        h = T.mul(h, s)                  # row scale by sigma
        y = T.matmul(h, T.transpose(self.U))
        return T.add(y, self.bias)

    def factors(self) -> SVDFactors:
        return SVDFactors(self.U.data, self.sigma.data, self.V.data)

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        return merge(self)


def decompose_layer(W, b=None, layer: int = 0, tag: str = "other") -> SpectralLinear:
    """Replace a dense ``(W, b)`` by its factored form. A missing bias becomes zeros."""
    W = np.asarray(W)
    if W.dtype not in (np.float32, np.float64):
        W = W.astype(np.float64)
    f = svd_thin(W)
    if b is None:
        b = np.zeros(W.shape[0], dtype=W.dtype)
    b = np.asarray(b, dtype=W.dtype)
    if b.shape != (W.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match output dim {W.shape[0]}")
    if tag not in TAG_ORDER:
        raise ValidationError(f"unknown module tag {tag!r}")
    return SpectralLinear(f, b, layer=layer, tag=tag)


def spectral_from_linear(lin: Linear) -> SpectralLinear:
    W, b = lin.dense()
    return decompose_layer(W, b, layer=lin.layer, tag=lin.tag)


def merge(layer: SpectralLinear) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(U diag(sigma) V^T, b)`` for export."""
    W = (layer.U.data * layer.sigma.data) @ layer.V.data.T
    return W, layer.bias.data.copy()


def delta_star(layer: SpectralLinear) -> np.ndarray:
    """``U diag(sigma - sigma0) V^T`` in float64. The bias drift is ``bias_delta``."""
    U = layer.U.data.astype(np.float64)
    V = layer.V.data.astype(np.float64)
    d = layer.sigma.data.astype(np.float64) - layer.sigma0.data.astype(np.float64)
    return (U * d) @ V.T


def bias_delta(layer: SpectralLinear) -> np.ndarray:
    return layer.bias.data.astype(np.float64) - layer.bias0.data.astype(np.float64)


class LoRALinear(Module):
    """Frozen dense base plus a trainable ``scale * B A`` bypass (B starts at zero)."""

    def __init__(self, base: Linear, r: int, alpha: float, rng: np.random.Generator):
        if r < 1:
            raise ValidationError(f"LoRA rank must be >= 1, got {r}")
        if r > min(base.d_in, base.d_out):
            raise ValidationError(f"LoRA rank {r} exceeds min(d_r, d_c) = {min(base.d_in, base.d_out)}")
        dtype = base.weight.dtype
        base.freeze()
        self.base = base
        self.A = Tensor((rng.standard_normal((r, base.d_in)) / np.sqrt(base.d_in)).astype(dtype),
                        requires_grad=True, name="A")
        self.B = Tensor(np.zeros((base.d_out, r), dtype=dtype), requires_grad=True, name="B")
        self.r = r
        self.scale = alpha / r
        self.layer = base.layer
        self.tag = base.tag

    @property
    def d_in(self) -> int:
        return self.base.d_in

    @property
    def d_out(self) -> int:
        return self.base.d_out

    def __call__(self, x: Tensor) -> Tensor:
        return apply_rows(x, self.d_in, self._rows)

    def _rows(self, x: Tensor) -> Tensor:
        y = self.base(x)
        low = T.matmul(T.matmul(x, T.transpose(self.A)), T.transpose(self.B))
        return T.add(y, T.mul(low, self.scale))

    def delta(self) -> np.ndarray:
        return self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))

    def dense(self) -> tuple[np.ndarray, np.ndarray | None]:
        W, b = self.base.dense()
        return (W.astype(np.float64) + self.delta()).astype(W.dtype), b
