"""Training loop with freezing hooks, AdamW/SGD, baselines and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .avf import (
    AVFConfig,
    VectorRecord,
    VectorRegistry,
    avf_step,
    is_avf_step,
    l1_penalty,
    random_freeze_step,
    sigma_dropout,
    write_registry_csv,
)
from .checkpoint import Checkpoint
from .errors import CheckpointError, DimensionError, NumericalError, ValidationError
from .models import (
    Model,
    ModelSpec,
    VariantConfig,
    attach_lora,
    build_model,
    make_bias_only,
    make_full_ft,
    spectral_layers,
    spectralize,
)
from .nn import TAG_ORDER
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("vectorfit", "full_ft", "bias_only", "lora", "l1", "random_freeze", "sigma_dropout")
SPECTRAL_MODES = ("vectorfit", "l1", "random_freeze", "sigma_dropout")
HISTORY_CSV_HEADER = ("step", "loss", "lr", "frozen_count")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup: int = 0
    optimizer: str = "adamw"
    mode: str = "vectorfit"
    variant: str = "full_avf"
    avf: AVFConfig | None = None
    lora_r: int = 2
    lora_alpha: float | None = None
    l1_lambda: float = 1e-4
    dropout_p: float = 0.1
    decompose_head: bool = False
    log_grads: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        VariantConfig(self.variant)
        if self.avf is not None and not (
            self.mode == "random_freeze" or (self.mode == "vectorfit" and self.variant == "full_avf")
        ):
            raise ValidationError(
                f"an AVF schedule only applies to vectorfit/full_avf or random_freeze, not {self.mode}/{self.variant}"
            )
        if self.mode == "random_freeze" and self.avf is None:
            raise ValidationError("random_freeze needs a freezing schedule (avf)")
        if self.mode == "vectorfit" and self.variant == "full_avf" and self.avf is None:
            raise ValidationError("variant full_avf needs an AVF schedule")
        if self.mode == "l1" and self.l1_lambda < 0:
            raise ValidationError("l1_lambda must be >= 0")
        if self.mode == "sigma_dropout" and not 0.0 <= self.dropout_p < 1.0:
            raise ValidationError("dropout_p must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["avf"] = None if self.avf is None else dataclasses.asdict(self.avf)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if d.get("avf") is not None:
            d["avf"] = AVFConfig(**d["avf"])
        return cls(**d)


# -- optimizers -------------------------------------------------------------

def adamw_update(p, g, m, v, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
    """One decoupled-weight-decay Adam step; returns new (p, m, v). ``t`` starts at 1."""
    if t < 1:
        raise ValidationError(f"Adam step counter must start at 1, got {t}")
    dt = p.dtype.type
    m = dt(beta1) * m + dt(1 - beta1) * g
    v = dt(beta2) * v + dt(1 - beta2) * (g * g)
    m_hat = m / dt(1 - beta1**t)
    v_hat = v / dt(1 - beta2**t)
    p = p - dt(lr * weight_decay) * p - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return p, m, v


class AdamW:
    """Per-tensor moments and step counts; a skipped (frozen) tensor keeps both."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.state: dict[str, dict] = {}

    def propose(self, name: str, p: np.ndarray, g: np.ndarray, lr: float):
        st = self.state.get(name)
        if st is None:
            st = {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0}
        t = st["t"] + 1
        new_p, m, v = adamw_update(p, g, st["m"], st["v"], t, lr, self.beta1, self.beta2,
                                   self.eps, self.weight_decay)
        return new_p, {"m": m, "v": v, "t": t}

    def commit(self, name: str, st: dict) -> None:
        self.state[name] = st

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.state.items():
            out[f"opt/{name}/m"] = st["m"]
            out[f"opt/{name}/v"] = st["v"]
        return out

    def counters(self) -> dict[str, int]:
        return {name: st["t"] for name, st in self.state.items()}

    def restore(self, arrays: dict[str, np.ndarray], counters: dict[str, int]) -> None:
        self.state = {name: {"m": arrays[f"opt/{name}/m"].copy(), "v": arrays[f"opt/{name}/v"].copy(), "t": t}
                      for name, t in counters.items()}


class SGD:
    """Plain gradient descent: update = lr * grad."""

    def __init__(self, weight_decay=0.0):
        self.weight_decay = weight_decay
        self.state: dict[str, dict] = {}

    def propose(self, name, p, g, lr):
        dt = p.dtype.type
        if self.weight_decay:
            p = p - dt(lr * self.weight_decay) * p
        return p - dt(lr) * g, None

    def commit(self, name, st) -> None:
        pass

    def arrays(self):
        return {}

    def counters(self):
        return {}

    def restore(self, arrays, counters) -> None:
        pass


# -- run bookkeeping -------------------------------------------------------

@dataclass
class RunHistory:
    steps: list[tuple[int, float, float, int]] = field(default_factory=list)
    registry_rows: list[tuple] = field(default_factory=list)
    avf_steps: list[int] = field(default_factory=list)
    freeze_changes: list[tuple[int, tuple]] = field(default_factory=list)
    # name -> list of (step, value before, proposed value, frozen)
    grad_log: dict[str, list[tuple[int, np.ndarray, np.ndarray, bool]]] | None = None
    start_values: dict[str, np.ndarray] = field(default_factory=dict)
    end_values: dict[str, np.ndarray] = field(default_factory=dict)
    # parameter name -> (layer, module, kind) of the registry vector it holds
    labels: dict[str, tuple[int, str, str]] = field(default_factory=dict)
    optimizer: str = "adamw"

    @property
    def losses(self) -> list[float]:
        return [s[1] for s in self.steps]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_CSV_HEADER)
            for row in self.steps:
                w.writerow((row[0], repr(row[1]), repr(row[2]), row[3]))

    def write_registry_csv(self, path) -> None:
        write_registry_csv(path, self.registry_rows)

    def grad_log_arrays(self) -> tuple[dict[str, np.ndarray], dict]:
        """Flatten the gradient log into named arrays (for the checkpoint container)."""
        arrays, meta = {}, {"vectors": []}
        for name, entries in (self.grad_log or {}).items():
            arrays[f"{name}/steps"] = np.array([e[0] for e in entries], dtype=np.int64)
            arrays[f"{name}/before"] = np.array([e[1] for e in entries])
            arrays[f"{name}/proposed"] = np.array([e[2] for e in entries])
            arrays[f"{name}/frozen"] = np.array([e[3] for e in entries], dtype=np.int64)
            arrays[f"{name}/start"] = self.start_values[name]
            arrays[f"{name}/end"] = self.end_values[name]
            meta["vectors"].append(name)
        meta["optimizer"] = self.optimizer
        meta["labels"] = {k: list(v) for k, v in self.labels.items()}
        return arrays, meta

    @classmethod
    def from_grad_log_arrays(cls, arrays: dict[str, np.ndarray], meta: dict) -> RunHistory:
        h = cls(grad_log={}, optimizer=meta.get("optimizer", "sgd"),
                labels={k: tuple(v) for k, v in meta.get("labels", {}).items()})
        for name in meta["vectors"]:
            steps = arrays[f"{name}/steps"]
            h.grad_log[name] = [
                (int(s), b, p, bool(f))
                for s, b, p, f in zip(steps, arrays[f"{name}/before"], arrays[f"{name}/proposed"],
                                      arrays[f"{name}/frozen"])
            ]
            h.start_values[name] = arrays[f"{name}/start"]
            h.end_values[name] = arrays[f"{name}/end"]
        return h


# -- model preparation -----------------------------------------------------

def prepare_model(model: Model, cfg: TrainConfig) -> tuple[Model, VectorRegistry | None]:
    """Apply the adaptation selected by ``cfg.mode`` to a dense model."""
    if cfg.mode in SPECTRAL_MODES:
        return spectralize(model, cfg.variant, decompose_head=cfg.decompose_head)
    if cfg.mode == "full_ft":
        return make_full_ft(model), None
    if cfg.mode == "bias_only":
        return make_bias_only(model), None
    return attach_lora(model, cfg.lora_r, cfg.lora_alpha, seed=cfg.seed), None


def total_steps(cfg: TrainConfig, data) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * data.steps_per_epoch(cfg.batch_size)


def evaluate(model: Model, data, split: str = "val") -> dict[str, float]:
    """Mean cross-entropy (nats) and accuracy over a split."""
    total, correct, count = 0.0, 0, 0
    with T.no_grad():
        for x, y in data.eval_batches(split):
            logits = model(x)
            flat = T.reshape(logits, (-1, logits.shape[-1]))
            yy = np.asarray(y).reshape(-1)
            total += float(T.cross_entropy(flat, yy).data) * yy.size
            correct += int((flat.data.argmax(axis=-1) == yy).sum())
            count += yy.size
    if count == 0:
        return {"loss": float("nan"), "accuracy": float("nan")}
    return {"loss": total / count, "accuracy": correct / count}


class Trainer:
    """Owns a prepared model, its registry and optimizer state, and the step counter."""

    def __init__(self, model: Model, registry: VectorRegistry | None, data, cfg: TrainConfig,
                 extra_meta: dict | None = None):
        self.model = model
        self.registry = registry
        self.data = data
        self.cfg = cfg
        self.step = 0
        self.extra_meta = dict(extra_meta or {})
        if cfg.optimizer == "adamw":
            self.opt = AdamW(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        else:
            self.opt = SGD(cfg.weight_decay)
        self.params = [(n, t) for n, t in model.named_parameters() if t.requires_grad]
        self.history = RunHistory(optimizer=cfg.optimizer)
        self._record_names: dict[int, str] = {}
        if registry is not None:
            by_tensor = {id(t): n for n, t in model.named_parameters()}
            self._record_names = {id(r): by_tensor[id(r.param)] for r in registry}
            self.history.labels = {self._record_names[id(r)]: r.id for r in registry}
            if cfg.log_grads:
                self.history.grad_log = {self._record_names[id(r)]: [] for r in registry}
        if cfg.mode == "sigma_dropout":
            self._install_dropout()
        self._last_frozen: tuple = ()

    @classmethod
    def create(cls, spec_or_model, data, cfg: TrainConfig, extra_meta: dict | None = None) -> Trainer:
        model = build_model(spec_or_model) if isinstance(spec_or_model, ModelSpec) else spec_or_model
        model, registry = prepare_model(model, cfg)
        return cls(model, registry, data, cfg, extra_meta)

    # -- helpers
    def _install_dropout(self) -> None:
        tr = self

        def make(layer):
            def transform(sigma: Tensor) -> Tensor:
                if not T.is_grad_enabled() or not sigma.requires_grad:
                    return sigma
                rng = np.random.default_rng([tr.cfg.seed, tr.step, 3, layer.layer, TAG_ORDER[layer.tag]])
                return sigma_dropout(sigma, tr.cfg.dropout_p, rng, train_mode=True)
            return transform

        for layer in spectral_layers(self.model):
            layer.sigma_transform = make(layer)

    def frozen_names(self) -> set[str]:
        if self.registry is None:
            return set()
        return {self._record_names[id(r)] for r in self.registry if r.frozen}

    def lr_at(self, t: int) -> float:
        if self.cfg.warmup > 0 and t < self.cfg.warmup:
            return self.cfg.lr * (t + 1) / self.cfg.warmup
        return self.cfg.lr

    def _freeze_hook(self, t: int) -> None:
        cfg, reg = self.cfg.avf, self.registry
        if cfg is None or reg is None or len(reg) == 0:
            return
        if is_avf_step(t, cfg):
            if self.cfg.mode == "random_freeze":
                random_freeze_step(reg, cfg.k, np.random.default_rng([self.cfg.seed, t, 2]))
            else:
                avf_step(reg, cfg)
            self.history.avf_steps.append(t)
            self.history.registry_rows.extend(reg.rows(t))
        elif t == cfg.release_step:
            reg.unfreeze_all()
            self.history.registry_rows.extend(reg.rows(t))
        frozen = tuple(sorted((r.sort_key for r in reg if r.frozen)))
        if frozen != self._last_frozen:
            self.history.freeze_changes.append((t, frozen))
            self._last_frozen = frozen

    def _loss(self, x, y) -> Tensor:
        loss = self.model.loss(x, y)
        if self.cfg.mode == "l1" and self.registry is not None and self.cfg.l1_lambda > 0:
            loss = T.add(loss, l1_penalty(self.registry, self.cfg.l1_lambda))
        return loss

    # -- main loop
    def train_step(self) -> float:
        t = self.step
        if t == 0 and self.registry is not None:
            self._snapshot_start()
        self._freeze_hook(t)
        x, y = self.data.batch(t, self.cfg.batch_size, self.cfg.seed)
        self.model.zero_grad()
        loss = self._loss(x, y)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss at step {t}")
        loss.backward()
        lr = self.lr_at(t)
        frozen = self.frozen_names()
        logging_grads = self.history.grad_log is not None
        for name, p in self.params:
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad
                if not np.all(np.isfinite(g)):
                    raise NumericalError(f"non-finite gradient for {name} at step {t}")
            is_frozen = name in frozen
            if is_frozen and not logging_grads:
                continue
            new_p, st = self.opt.propose(name, p.data, g, lr)
            if logging_grads and name in self.history.grad_log:
                self.history.grad_log[name].append((t, p.data.copy(), new_p.copy(), is_frozen))
            if is_frozen:
                continue
            p.data = new_p
            self.opt.commit(name, st)
        self.history.steps.append((t, value, lr, len(frozen)))
        self.step += 1
        return value

    def _snapshot_start(self) -> None:
        self.history.start_values = {self._record_names[id(r)]: r.current().copy() for r in self.registry}

    def run(self, until: int | None = None) -> RunHistory:
        end = total_steps(self.cfg, self.data) if until is None else until
        while self.step < end:
            self.train_step()
        self.finish()
        return self.history

    def finish(self) -> None:
        """Record the end-of-run strength snapshot and final vector values."""
        if self.registry is None:
            return
        if not self.history.start_values:
            self._snapshot_start()
        self.registry.refresh_strengths()
        self.history.registry_rows.extend(self.registry.rows(self.step))
        self.history.end_values = {self._record_names[id(r)]: r.current().copy() for r in self.registry}

    # -- checkpoints
    def checkpoint(self, extra: dict | None = None) -> Checkpoint:
        arrays = {f"param/{n}": t.data for n, t in self.model.named_tensors()}
        arrays.update(self.opt.arrays())
        reg_meta = []
        if self.registry is not None:
            for r in self.registry:
                arrays[f"registry/{r.name}/v0"] = r.v0
                reg_meta.append({"layer": r.layer, "module": r.module, "kind": r.kind,
                                 "strength": r.strength, "ema": r.ema, "frozen": r.frozen})
        meta = {
            "step": self.step,
            "model_spec": self.model.spec.to_dict(),
            "train": self.cfg.to_dict(),
            "adaptation": self.model.adaptation,
            "registry": reg_meta if self.registry is not None else None,
            "optimizer_steps": self.opt.counters(),
            "last_frozen": [list(k) for k in self._last_frozen],
        }
        meta.update(self.extra_meta)
        if extra:
            meta.update(extra)
        return Checkpoint(meta, arrays)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, data) -> Trainer:
        model = restore_model(ckpt)
        cfg = TrainConfig.from_dict(ckpt.meta["train"])
        registry = None
        if ckpt.meta.get("registry") is not None:
            records = []
            by_layer = {(l.layer, l.tag): l for l in spectral_layers(model)}
            for rm in ckpt.meta["registry"]:
                layer = by_layer[(rm["layer"], rm["module"])]
                rec = VectorRecord(rm["layer"], rm["module"], rm["kind"], None,
                                   layer.sigma if rm["kind"] == "sigma" else layer.bias,
                                   rm["strength"], rm["ema"], rm["frozen"])
                rec.v0 = ckpt.arrays[f"registry/{rec.name}/v0"].copy()
                records.append(rec)
            registry = VectorRegistry(records)
        extra = {k: v for k, v in ckpt.meta.items()
                 if k not in ("step", "model_spec", "train", "adaptation", "registry",
                              "optimizer_steps", "last_frozen")}
        tr = cls(model, registry, data, cfg, extra)
        tr.step = int(ckpt.meta["step"])
        tr.opt.restore(ckpt.arrays, ckpt.meta.get("optimizer_steps", {}))
        tr._last_frozen = tuple(tuple(k) for k in ckpt.meta.get("last_frozen", []))
        return tr


def restore_model(ckpt: Checkpoint) -> Model:
    """Rebuild the model (with its adaptation) and load every array from ``ckpt``."""
    try:
        spec = ModelSpec(**ckpt.meta["model_spec"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint has no usable model spec ({exc})") from None
    model = build_model(spec)
    adaptation = ckpt.meta.get("adaptation")
    if adaptation is not None:
        cfg = TrainConfig.from_dict(ckpt.meta["train"])
        model, _ = prepare_model(model, cfg)
        if model.adaptation != adaptation:
            raise CheckpointError(f"adaptation mismatch: {model.adaptation} vs {adaptation}")
    params = {k[len("param/"):]: v for k, v in ckpt.arrays.items() if k.startswith("param/")}
    try:
        model.load_arrays(params)
    except DimensionError as exc:
        raise CheckpointError(f"checkpoint does not match model: {exc}") from None
    return model


def base_model(ckpt: Checkpoint) -> Model:
    """Dense model from a pretraining checkpoint, ready for a fresh adaptation."""
    adaptation = ckpt.meta.get("adaptation")
    if adaptation not in (None, "full_ft"):
        raise ValidationError(f"source checkpoint is already adapted ({adaptation})")
    model = restore_model(ckpt)
    for _, t in model.named_tensors():
        t.requires_grad = False
        t.grad = None
    model.adaptation = None
    return model


def train(model, data, cfg: TrainConfig, init_checkpoint: list | None = None):
    """Prepare ``model`` per ``cfg.mode``, train, and return ``(trainer, history)``.

    When ``init_checkpoint`` is a list, the pre-training checkpoint is appended to it.
    """
    tr = Trainer.create(model, data, cfg)
    if init_checkpoint is not None:
        init_checkpoint.append(tr.checkpoint())
    history = tr.run()
    return tr, history
