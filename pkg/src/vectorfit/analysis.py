"""Post-hoc diagnostics over checkpoints and run histories.

CSV schemas written here:

* ``spectrum.csv``  layer, module, index, sigma
* ``strength.csv``  step, layer, module, kind, S, S_ema, frozen
* ``variation.csv`` layer, module, index, delta_sigma
* ``ledger.csv``    layer, module, kind, total, frozen_sum, applied
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .avf import write_registry_csv
from .checkpoint import Checkpoint
from .errors import ContractError, ValidationError
from .linalg import effective_rank, svd_thin
from .models import spectral_layers
from .spectral import LoRALinear, SpectralLinear, delta_star
from .trainer import RunHistory, restore_model

SPECTRUM_HEADER = ("layer", "module", "index", "sigma")
VARIATION_HEADER = ("layer", "module", "index", "delta_sigma")
LEDGER_HEADER = ("layer", "module", "kind", "total", "frozen_sum", "applied")


@dataclass
class LayerSpectrum:
    layer: int
    module: str
    sigma: np.ndarray
    rank: int
    frob: float
    bias_l1: float


@dataclass
class SpectrumReport:
    layers: list[LayerSpectrum] = field(default_factory=list)

    def ranks(self) -> dict[tuple[int, str], int]:
        return {(s.layer, s.module): s.rank for s in self.layers}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SPECTRUM_HEADER)
            for s in self.layers:
                for i, v in enumerate(s.sigma):
                    w.writerow((s.layer, s.module, i, repr(float(v))))


def _same_run(init: Checkpoint, final: Checkpoint) -> None:
    for key in ("model_spec", "adaptation"):
        if init.meta.get(key) != final.meta.get(key):
            raise ValidationError(f"checkpoints disagree on {key}: {init.meta.get(key)} vs {final.meta.get(key)}")


def _f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


def _weight_delta(l0, l1) -> tuple[np.ndarray, np.ndarray]:
    """(weight change, bias change) of one tagged layer in float64.

    Factored and low-rank layers are differenced in their own parameters so
    that rounding of a merged dense matrix cannot add spurious rank.
    """
    if isinstance(l1, SpectralLinear):
        if not (np.array_equal(l0.U.data, l1.U.data) and np.array_equal(l0.V.data, l1.V.data)):
            raise ValidationError(f"layer {l1.id}: singular bases differ between checkpoints")
        D = delta_star(l1) - delta_star(l0)
    elif isinstance(l1, LoRALinear):
        D = l1.delta() - l0.delta() + _f64(l1.base.weight.data) - _f64(l0.base.weight.data)
    else:
        D = _f64(l1.weight.data) - _f64(l0.weight.data)
    b0, b1 = l0.dense()[1], l1.dense()[1]
    db = np.zeros(D.shape[0]) if b1 is None else _f64(b1) - _f64(b0)
    return D, db


def delta_spectrum(init: Checkpoint, final: Checkpoint, tau_rel: float = 1e-8) -> SpectrumReport:
    """Singular values of the weight change ``W_final - W_init`` of each tagged layer."""
    _same_run(init, final)
    m0, m1 = restore_model(init), restore_model(final)
    report = SpectrumReport()
    for l0, l1 in zip(m0.tagged_layers(), m1.tagged_layers()):
        D, db = _weight_delta(l0, l1)
        report.layers.append(LayerSpectrum(l1.layer, l1.tag, svd_thin(D).sigma, effective_rank(D, tau_rel),
                                           float(np.linalg.norm(D)), float(np.abs(db).sum())))
    return report


@dataclass
class StrengthReport:
    grid: dict[tuple[int, str, str], float]
    series: list[tuple]

    def mean(self) -> float:
        return float(np.mean(list(self.grid.values()))) if self.grid else 0.0

    def write_csv(self, path) -> None:
        write_registry_csv(path, self.series)


def strength_heatmap(history: RunHistory) -> StrengthReport:
    """Final per-vector strengths plus every recorded registry snapshot."""
    grid: dict[tuple[int, str, str], float] = {}
    for step, layer, module, kind, s, _ema, _fz in history.registry_rows:
        grid[(layer, module, kind)] = s  # later rows overwrite earlier
    return StrengthReport(grid, list(history.registry_rows))


def sigma_variation(init: Checkpoint, final: Checkpoint, n: int = 64) -> dict[tuple[int, str], np.ndarray]:
    """``sigma_final - sigma_init`` over the first ``n`` indices of each factored layer."""
    _same_run(init, final)
    l0 = {l.id: l for l in spectral_layers(restore_model(init))}
    out = {}
    for l1 in spectral_layers(restore_model(final)):
        m = min(n, l1.rank_dim)
        out[l1.id] = (l1.sigma.data[:m].astype(np.float64) - l0[l1.id].sigma.data[:m].astype(np.float64))
    return out


def write_variation_csv(path, variation: dict[tuple[int, str], np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VARIATION_HEADER)
        for (layer, module), row in variation.items():
            for i, v in enumerate(row):
                w.writerow((layer, module, i, repr(float(v))))


@dataclass
class LedgerRow:
    layer: int
    module: str
    kind: str
    total: np.ndarray
    frozen_sum: np.ndarray
    applied: np.ndarray


def _fractions(a) -> np.ndarray:
    return np.array([Fraction(float(x)) for x in np.asarray(a).reshape(-1)], dtype=object)


def avf_ledger(history: RunHistory) -> list[LedgerRow]:
    """Split each vector's accumulated updates into applied and frozen parts.

    ``total`` sums the proposed step of every iteration, ``frozen_sum`` only
    those proposed while frozen, and ``applied`` is the observed change. In
    exact rational arithmetic ``applied == total - frozen_sum`` must hold; a
    violation raises ``ContractError``.
    """
    if history.grad_log is None:
        raise ContractError("history has no gradient log; train with log_grads=True")
    rows = []
    for name, entries in history.grad_log.items():
        layer, module, kind = history.labels.get(name, (name, "", ""))
        total = frozen = None
        for _step, before, proposed, is_frozen in entries:
            d = _fractions(proposed) - _fractions(before)
            total = d if total is None else total + d
            if is_frozen:
                frozen = d if frozen is None else frozen + d
        size = np.asarray(history.start_values[name]).size
        zero = np.array([Fraction(0)] * size, dtype=object)
        total = zero.copy() if total is None else total
        frozen = zero.copy() if frozen is None else frozen
        applied = _fractions(history.end_values[name]) - _fractions(history.start_values[name])
        if not all(applied == total - frozen):
            raise ContractError(f"ledger identity violated for {name}")
        rows.append(LedgerRow(layer, module, kind, total, frozen, applied))
    return rows


def write_ledger_csv(path, rows: list[LedgerRow]) -> None:
    """One line per vector; each column holds the float sum of the exact rationals."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_HEADER)
        for r in rows:
            w.writerow((r.layer, r.module, r.kind, repr(float(sum(r.total))),
                        repr(float(sum(r.frozen_sum))), repr(float(sum(r.applied)))))
