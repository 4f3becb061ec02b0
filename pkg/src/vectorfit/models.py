"""Toy architectures whose weight matrices carry the q/k/v/o/f1/f2 tags,
and the adaptation entry points (spectral, LoRA, full, bias-only)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .avf import VectorRecord, VectorRegistry
from .errors import ContractError, ValidationError
from .nn import ATTENTION_TAGS, MLP_TAGS, Embedding, LayerNorm, Linear, Module, count_params
from .spectral import LoRALinear, SpectralLinear, spectral_from_linear
from .tensor import Tensor

ARCHITECTURES = ("mlp", "transformer")

# variant -> (tags whose sigma trains, whether biases of all six tags train)
VARIANTS: dict[str, tuple[tuple[str, ...], bool]] = {
    "sigma_a": (ATTENTION_TAGS, False),
    "sigma": (ATTENTION_TAGS + MLP_TAGS, False),
    "sigma_a_plus_b": (ATTENTION_TAGS, True),
    "full_no_avf": (ATTENTION_TAGS + MLP_TAGS, True),
    "full_avf": (ATTENTION_TAGS + MLP_TAGS, True),
}


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "transformer"
    depth: int = 2
    hidden: int = 64
    heads: int = 4
    ffn: int = 256
    vocab: int = 96
    max_len: int = 32
    causal: bool = True
    input_dim: int = 2
    classes: int = 2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}")
        dims = dict(depth=self.depth, hidden=self.hidden, heads=self.heads, ffn=self.ffn,
                    vocab=self.vocab, max_len=self.max_len, input_dim=self.input_dim, classes=self.classes)
        bad = [k for k, v in dims.items() if v < 1]
        if bad:
            raise ValidationError(f"dimensions must be >= 1: {bad}")
        if self.architecture == "transformer" and self.hidden % self.heads:
            raise ValidationError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "full_avf"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}")

    @property
    def sigma_tags(self) -> tuple[str, ...]:
        return VARIANTS[self.variant][0]

    @property
    def train_bias(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def uses_avf(self) -> bool:
        return self.variant == "full_avf"


class Model(Module):
    spec: ModelSpec
    adaptation: str | None

    def tagged_slots(self) -> Iterator[tuple[Module, str]]:
        """(owner, attribute) for every tagged matrix, in canonical id order."""
        raise NotImplementedError

    def tagged_layers(self):
        for owner, attr in self.tagged_slots():
            yield getattr(owner, attr)

    def loss(self, x, y) -> Tensor:
        logits = self(x)
        return T.cross_entropy(T.reshape(logits, (-1, logits.shape[-1])), np.asarray(y).reshape(-1))


class MLPBlock(Module):
    def __init__(self, d_in: int, hidden: int, layer: int, rng, dtype):
        self.f1 = Linear(d_in, hidden, rng, dtype=dtype, tag="f1", layer=layer)
        self.f2 = Linear(hidden, hidden, rng, dtype=dtype, tag="f2", layer=layer)

    def __call__(self, x: Tensor) -> Tensor:
        return T.gelu(self.f2(T.gelu(self.f1(x))))


class MLP(Model):
    """Classifier: ``depth`` blocks of (f1, f2) then a dense head."""

    def __init__(self, spec: ModelSpec):
        rng = np.random.default_rng(spec.seed)
        dt = spec.np_dtype
        self.spec = spec
        self.adaptation = None
        self.blocks = [MLPBlock(spec.input_dim if l == 0 else spec.hidden, spec.hidden, l, rng, dt)
                       for l in range(spec.depth)]
        self.head = Linear(spec.hidden, spec.classes, rng, dtype=dt, tag="other", layer=spec.depth)

    def tagged_slots(self):
        for b in self.blocks:
            yield b, "f1"
            yield b, "f2"

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.spec.np_dtype))
        for b in self.blocks:
            h = b(h)
        return self.head(h)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, ffn: int, layer: int, rng, dtype, causal: bool):
        self.ln1 = LayerNorm(dim, dtype)
        self.q = Linear(dim, dim, rng, dtype=dtype, tag="q", layer=layer)
        self.k = Linear(dim, dim, rng, dtype=dtype, tag="k", layer=layer)
        self.v = Linear(dim, dim, rng, dtype=dtype, tag="v", layer=layer)
        self.o = Linear(dim, dim, rng, dtype=dtype, tag="o", layer=layer)
        self.ln2 = LayerNorm(dim, dtype)
        self.f1 = Linear(dim, ffn, rng, dtype=dtype, tag="f1", layer=layer)
        self.f2 = Linear(ffn, dim, rng, dtype=dtype, tag="f2", layer=layer)
        self.heads = heads
        self.causal = causal

    def attention(self, x: Tensor) -> Tensor:
        B, S, D = x.shape
        H = self.heads
        dh = D // H

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (B, S, H, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if self.causal:
            mask = np.triu(np.full((S, S), -1e9), k=1)
            scores = T.add_constant(scores, mask)
        att = T.softmax(scores)
        out = T.transpose(T.matmul(att, v), (0, 2, 1, 3))
        return self.o(T.reshape(out, (B, S, D)))

    def __call__(self, x: Tensor) -> Tensor:
        x = T.add(x, self.attention(self.ln1(x)))
        return T.add(x, self.f2(T.gelu(self.f1(self.ln2(x)))))


class Transformer(Model):
    """Pre-norm encoder over token ids producing per-position logits."""

    def __init__(self, spec: ModelSpec):
        rng = np.random.default_rng(spec.seed)
        dt = spec.np_dtype
        self.spec = spec
        self.adaptation = None
        self.tok = Embedding(spec.vocab, spec.hidden, rng, dt)
        self.pos = Embedding(spec.max_len, spec.hidden, rng, dt)
        self.blocks = [TransformerBlock(spec.hidden, spec.heads, spec.ffn, l, rng, dt, spec.causal)
                       for l in range(spec.depth)]
        self.ln_f = LayerNorm(spec.hidden, dt)
        self.head = Linear(spec.hidden, spec.vocab, rng, dtype=dt, tag="other", layer=spec.depth)

    def tagged_slots(self):
        for b in self.blocks:
            for tag in ATTENTION_TAGS + MLP_TAGS:
                yield b, tag

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] > self.spec.max_len:
            raise ValidationError(f"token batch must be (batch, <= {self.spec.max_len}), got {ids.shape}")
        positions = np.broadcast_to(np.arange(ids.shape[1]), ids.shape)
        h = T.add(self.tok(ids), self.pos(positions))
        for b in self.blocks:
            h = b(h)
        return self.head(self.ln_f(h))


def build_model(spec: ModelSpec) -> Model:
    if spec.architecture == "mlp":
        return MLP(spec)
    return Transformer(spec)


def _check_fresh(model: Model) -> None:
    if model.adaptation is not None:
        raise ContractError(f"model already adapted ({model.adaptation})")


def spectralize(model: Model, variant: VariantConfig | str, decompose_head: bool = False
                ) -> tuple[Model, VectorRegistry]:
    """Swap every tagged matrix for its factored form and pick trainable vectors."""
    _check_fresh(model)
    if isinstance(variant, str):
        variant = VariantConfig(variant)
    model.freeze()
    slots = list(model.tagged_slots())
    if decompose_head:
        slots.append((model, "head"))
    records = []
    for owner, attr in slots:
        layer = spectral_from_linear(getattr(owner, attr))
        setattr(owner, attr, layer)
        train_sigma = layer.tag in variant.sigma_tags or (layer.tag == "other" and "f1" in variant.sigma_tags)
        layer.sigma.requires_grad = train_sigma
        layer.bias.requires_grad = variant.train_bias
        if train_sigma:
            records.append(VectorRecord(layer.layer, layer.tag, "sigma", layer.sigma0.data.copy(), layer.sigma))
        if variant.train_bias:
            records.append(VectorRecord(layer.layer, layer.tag, "bias", layer.bias0.data.copy(), layer.bias))
    model.adaptation = f"vectorfit:{variant.variant}"
    return model, VectorRegistry(records)


def attach_lora(model: Model, r: int, alpha: float | None = None, seed: int = 0) -> Model:
    """Wrap every tagged matrix with a rank-``r`` bypass; only the bypass trains."""
    _check_fresh(model)
    alpha = float(r) if alpha is None else alpha
    rng = np.random.default_rng([seed, 7919])
    model.freeze()
    for owner, attr in model.tagged_slots():
        setattr(owner, attr, LoRALinear(getattr(owner, attr), r, alpha, rng))
    model.adaptation = f"lora:{r}:{alpha!r}"
    return model


def make_full_ft(model: Model) -> Model:
    _check_fresh(model)
    for _, t in model.named_parameters():
        t.requires_grad = True
    model.adaptation = "full_ft"
    return model


def make_bias_only(model: Model) -> Model:
    _check_fresh(model)
    model.freeze()
    for layer in model.tagged_layers():
        layer.bias.requires_grad = True
    model.adaptation = "bias_only"
    return model


def count_trainable(model: Module) -> int:
    return count_params(model, trainable_only=True)


def count_total(model: Module) -> int:
    return count_params(model)


def spectral_layers(model: Model) -> list[SpectralLinear]:
    return [m for m in model.modules() if isinstance(m, SpectralLinear)]


def lora_layers(model: Model) -> list[LoRALinear]:
    return [m for m in model.modules() if isinstance(m, LoRALinear)]
