"""Dense tensors with reverse-mode automatic differentiation.

Storage is a numpy array (row-major, float32 or float64). Every operation
that touches a tensor with ``requires_grad`` records its parents and a
closure that maps the output gradient to parent gradients; ``backward``
walks that record in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data: np.ndarray = arr if arr.flags.c_contiguous else arr.copy()
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        if self.data.size != 1 or self.data.ndim > 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._parents = ()
                node._backward = None

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _make(data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    parents = tuple(parents)
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = parents
        out._backward = backward
    return out


def _check_finite_shape(a: Tensor, b: Tensor, op: str) -> str:
    """Classify the broadcast between ``a`` and ``b``: same, scalar or row."""
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1 and b.ndim <= 1:
        return "scalar_b"
    if a.data.size == 1 and a.ndim <= 1:
        return "scalar_a"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, kind: str, which: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    if kind == f"scalar_{which}":
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    if kind == f"row_{which}":
        return g.reshape(-1, g.shape[-1]).sum(axis=0)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    kind = _check_finite_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, kind, "a", sa), _reduce_to(g, kind, "b", sb)

    return _make(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim != 0:
            raise DimensionError("mul: non-scalar constants must be wrapped in a Tensor")
        return _make(a.data * c, (a,), lambda g: (g * c,))
    kind = _check_finite_shape(a, b, "mul")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g * bd, kind, "a", sa), _reduce_to(g * ad, kind, "b", sb)

    return _make(ad * bd, (a, b), backward)


def scale_rows(m: Tensor, s: Tensor) -> Tensor:
    """Return ``diag(s) @ m`` for an r-by-n matrix ``m`` and length-r ``s``."""
    if m.ndim != 2 or s.ndim != 1 or m.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows: need (r, n) and (r,), got {m.shape} and {s.shape}")
    md, sd = m.data, s.data

    def backward(g):
        return g * sd[:, None], (g * md).sum(axis=1)

    return _make(md * sd[:, None], (m, s), backward)


def elementwise(op: str, a: Tensor, b) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "scale_rows":
        return scale_rows(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def abs_(a: Tensor) -> Tensor:
    # np.sign gives 0 at 0, which is the subgradient we want
    sgn = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sgn,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * x * (1 + k * x2))
    out = 0.5 * x * (1 + t)

    def backward(g):
        dinner = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return _make(out, (a,), backward)


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        if a.ndim != 2:
            raise DimensionError(f"transpose without axes needs a matrix, got {a.shape}")
        axes = (1, 0)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def sum_(a: Tensor, axis=None) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make(out, (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


# -- matmul -----------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim > 2 or b.ndim > 2) and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward)


# -- activations and losses ------------------------------------------------

def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    if a.shape[-1] == 0:
        raise DimensionError("softmax over an empty class dimension")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    if a.shape[-1] == 0:
        raise DimensionError("log_softmax over an empty class dimension")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(out, (a,), backward)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (N x C)."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects (N, C) logits, got {logits.shape}")
    n, c = logits.shape
    if c == 0:
        raise DimensionError("cross_entropy over an empty class dimension")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"cross_entropy: {n} rows but {targets.shape[0]} targets")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the per-feature affine."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: feature dim {d} vs gamma {gamma.shape}, beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        flat_g = g.reshape(-1, d)
        dgamma = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbeta = flat_g.sum(axis=0)
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), backward)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` at integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise DimensionError(f"embedding: ids out of range for vocabulary of {vocab}")

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make(weight.data[ids], (weight,), backward)


def dropout_mask(x: Tensor, mask: np.ndarray, scale: float) -> Tensor:
    """Multiply by a fixed 0/1 mask and a scale (inverted dropout)."""
    m = (mask * scale).astype(x.dtype)
    return _make(x.data * m, (x,), lambda g: (g * m,))


def add_constant(a: Tensor, c: np.ndarray) -> Tensor:
    """Add a non-differentiable array broadcast onto ``a`` (e.g. an attention mask)."""
    c = np.asarray(c, dtype=a.dtype)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_constant: {c.shape} does not broadcast onto {a.shape}")
    return _make(out, (a,), lambda g: (g,))
