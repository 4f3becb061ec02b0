"""Adaptive Vector Freezing and the comparison mechanisms.

Each trainable vector (a layer's singular values or its bias) carries a
training strength: its mean absolute drift from the value it had before
fine-tuning. At scheduled steps the strengths are folded into an
exponential moving average and the ``k`` vectors with the largest average
are frozen until the next scheduled step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ValidationError
from .nn import KIND_ORDER, TAG_ORDER
from .tensor import Tensor

REGISTRY_CSV_HEADER = ("step", "layer", "module", "kind", "S", "S_ema", "frozen")


@dataclass(frozen=True)
class AVFConfig:
    t_i: int
    t_f: int
    n_f: int
    k: int
    beta: float = 0.99
    # release every vector once the last freeze interval has elapsed
    release_after_final: bool = True

    def __post_init__(self):
        if self.t_i < 0:
            raise ValidationError(f"t_i must be >= 0, got {self.t_i}")
        if self.t_f < 1:
            raise ValidationError(f"t_f must be >= 1, got {self.t_f}")
        if self.n_f < 0 or self.k < 0:
            raise ValidationError("n_f and k must be non-negative")
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError(f"beta must lie in [0, 1), got {self.beta}")

    @property
    def release_step(self) -> int | None:
        if not self.release_after_final or self.n_f == 0:
            return None
        return self.t_i + self.n_f * self.t_f

    def schedule(self) -> list[int]:
        return [self.t_i + j * self.t_f for j in range(self.n_f)]


@dataclass
class VectorRecord:
    layer: int
    module: str
    kind: str
    v0: np.ndarray
    param: Tensor | None = None
    strength: float = 0.0
    ema: float = 0.0
    frozen: bool = False

    @property
    def id(self) -> tuple[int, str, str]:
        return (self.layer, self.module, self.kind)

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (self.layer, TAG_ORDER[self.module], KIND_ORDER[self.kind])

    @property
    def dim(self) -> int:
        return int(self.v0.shape[0])

    @property
    def name(self) -> str:
        return f"{self.layer}.{self.module}.{self.kind}"

    def current(self) -> np.ndarray:
        if self.param is None:
            raise ContractError(f"record {self.name} is not bound to a parameter")
        return self.param.data


@dataclass
class VectorRegistry:
    records: list[VectorRecord] = field(default_factory=list)

    def __post_init__(self):
        self.records.sort(key=lambda r: r.sort_key)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def frozen_ids(self) -> set[tuple[int, str, str]]:
        return {r.id for r in self.records if r.frozen}

    def by_id(self) -> dict[tuple[int, str, str], VectorRecord]:
        return {r.id: r for r in self.records}

    def unfreeze_all(self) -> None:
        for r in self.records:
            r.frozen = False

    def rows(self, step: int) -> list[tuple]:
        return [(step, r.layer, r.module, r.kind, r.strength, r.ema, int(r.frozen)) for r in self.records]

    def refresh_strengths(self) -> None:
        for r in self.records:
            r.strength = training_strength(r.v0, r.current())


def training_strength(v0, vt) -> float:
    """Mean absolute drift ``||v0 - vt||_1 / dim(v)``."""
    v0 = np.asarray(v0, dtype=np.float64)
    vt = np.asarray(vt, dtype=np.float64)
    if v0.shape != vt.shape:
        raise DimensionError(f"training_strength: shapes {v0.shape} and {vt.shape} differ")
    if v0.size == 0:
        return 0.0
    return float(np.abs(v0 - vt).sum() / v0.size)


def update_ema(prev: float, current: float, beta: float) -> float:
    return beta * prev + (1.0 - beta) * current


def is_avf_step(t: int, cfg: AVFConfig) -> bool:
    if cfg.n_f == 0 or t < cfg.t_i:
        return False
    j, rem = divmod(t - cfg.t_i, cfg.t_f)
    return rem == 0 and j < cfg.n_f


def _select_top(records: list[VectorRecord], k: int) -> list[VectorRecord]:
    ranked = sorted(records, key=lambda r: (-r.ema, r.sort_key))
    return ranked[: min(k, len(records))]


def avf_step(registry: VectorRegistry | list[VectorRecord], cfg: AVFConfig) -> set[tuple[int, str, str]]:
    """Refresh strengths and their moving averages, then freeze the top ``k``."""
    records = list(registry)
    if not records:
        raise ContractError("avf_step on an empty registry")
    for r in records:
        r.strength = training_strength(r.v0, r.current())
        r.ema = update_ema(r.ema, r.strength, cfg.beta)
        r.frozen = False
    for r in _select_top(records, cfg.k):
        r.frozen = True
    return {r.id for r in records if r.frozen}


def random_freeze_step(registry, k: int, rng: np.random.Generator) -> set[tuple[int, str, str]]:
    """Freeze ``k`` vectors drawn uniformly without replacement."""
    records = list(registry)
    if not records:
        raise ContractError("random_freeze_step on an empty registry")
    for r in records:
        r.strength = training_strength(r.v0, r.current())
        r.frozen = False
    chosen = rng.choice(len(records), size=min(k, len(records)), replace=False)
    for i in chosen:
        records[int(i)].frozen = True
    return {r.id for r in records if r.frozen}


def l1_penalty(registry, lam: float) -> Tensor:
    """``lam * sum |sigma_i|`` over the registry's singular-value vectors."""
    if lam < 0:
        raise ValidationError(f"L1 weight must be >= 0, got {lam}")
    sigmas = [r.param for r in registry if r.kind == "sigma"]
    if lam == 0 or not sigmas:
        return Tensor(np.array(0.0))
    total = None
    for p in sigmas:
        term = T.sum_(T.abs_(p))
        total = term if total is None else T.add(total, term)
    return T.mul(total, lam)


def sigma_dropout(sigma: Tensor, p: float, rng: np.random.Generator, train_mode: bool = True) -> Tensor:
    """Inverted dropout on singular values; identity outside training."""
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability must lie in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        return sigma
    keep = rng.random(sigma.shape) >= p
    return T.dropout_mask(sigma, keep, 1.0 / (1.0 - p))


def write_registry_csv(path, rows: Iterable[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGISTRY_CSV_HEADER)
        for row in rows:
            w.writerow(row)
