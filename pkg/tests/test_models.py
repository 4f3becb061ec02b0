import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vectorfit.errors import ContractError, ValidationError
from vectorfit.models import (
    VARIANTS,
    ModelSpec,
    attach_lora,
    build_model,
    count_total,
    count_trainable,
    make_bias_only,
    make_full_ft,
    spectral_layers,
    spectralize,
)


def np_layernorm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def lin(layer, x):
    W, b = layer.dense()
    return x @ np.asarray(W, np.float64).T + b


def naive_transformer(model, ids):
    """Reference forward with an explicit loop over batch entries and heads."""
    spec = model.spec
    h = model.tok.weight.data[ids] + model.pos.weight.data[np.arange(ids.shape[1])]
    for blk in model.blocks:
        a = np_layernorm(h, blk.ln1.gamma.data, blk.ln1.beta.data)
        q, k, v = lin(blk.q, a), lin(blk.k, a), lin(blk.v, a)
        dh = spec.hidden // spec.heads
        out = np.zeros_like(q)
        S = ids.shape[1]
        for bi in range(ids.shape[0]):
            for hd in range(spec.heads):
                sl = slice(hd * dh, (hd + 1) * dh)
                scores = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(dh)
                for i in range(S):
                    for j in range(S):
                        if spec.causal and j > i:
                            scores[i, j] = -np.inf
                w = np.exp(scores - scores.max(-1, keepdims=True))
                w /= w.sum(-1, keepdims=True)
                out[bi, :, sl] = w @ v[bi, :, sl]
        h = h + lin(blk.o, out)
        m = np_layernorm(h, blk.ln2.gamma.data, blk.ln2.beta.data)
        h = h + lin(blk.f2, np_gelu(lin(blk.f1, m)))
    return lin(model.head, np_layernorm(h, model.ln_f.gamma.data, model.ln_f.beta.data))


def test_mlp_shape_contract():
    m = build_model(ModelSpec(architecture="mlp", depth=2, hidden=8, classes=2))
    out = m(np.random.default_rng(0).standard_normal((5, 2))).data
    assert out.shape == (5, 2) and np.all(np.isfinite(out))


@pytest.mark.parametrize("causal", [True, False])
def test_attention_matches_naive_loop(causal):
    model = build_model(ModelSpec(hidden=64, heads=4, ffn=256, depth=2, max_len=8, causal=causal))
    ids = np.random.default_rng(1).integers(0, 96, (2, 8))
    ref = naive_transformer(model, ids)
    got = model(ids).data
    assert np.abs(got - ref).max() <= 1e-5 * max(1.0, np.abs(ref).max())


def test_causal_mask_blocks_future():
    model = build_model(ModelSpec(hidden=16, heads=2, ffn=32, max_len=8))
    ids = np.random.default_rng(2).integers(0, 96, (1, 8))
    ids2 = ids.copy()
    ids2[0, -1] = (ids[0, -1] + 1) % 96
    np.testing.assert_array_equal(model(ids).data[0, :-1], model(ids2).data[0, :-1])


def test_same_seed_bit_identical():
    a, b = build_model(ModelSpec(seed=3)), build_model(ModelSpec(seed=3))
    for (na, ta), (nb, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert na == nb and ta.data.tobytes() == tb.data.tobytes()


@pytest.mark.parametrize("kw", [dict(hidden=10, heads=4), dict(depth=0), dict(architecture="rnn"), dict(dtype="int8")])
def test_invalid_spec(kw):
    with pytest.raises(ValidationError):
        ModelSpec(**kw)


def test_registry_counts_for_transformer():
    _, reg = spectralize(build_model(ModelSpec()), "sigma_a")
    kinds = [r.kind for r in reg]
    assert kinds.count("sigma") == 8 and kinds.count("bias") == 0
    _, reg = spectralize(build_model(ModelSpec()), "full_avf")
    kinds = [r.kind for r in reg]
    assert kinds.count("sigma") == 12 and kinds.count("bias") == 12


# hand counts for depth 2, dim 64, ffn 256: every matrix has 64 singular values,
# q/k/v/o/f2 biases have 64 entries and the f1 bias has 256
HAND_COUNTS = {
    "sigma_a": 2 * 4 * 64,
    "sigma": 2 * (4 * 64 + 64 + 64),
    "sigma_a_plus_b": 2 * 4 * 64 + 2 * (5 * 64 + 256),
    "full_no_avf": 2 * 6 * 64 + 2 * (5 * 64 + 256),
    "full_avf": 2 * 6 * 64 + 2 * (5 * 64 + 256),
}


@pytest.mark.parametrize("variant", sorted(VARIANTS))
def test_trainable_counts_match_hand(variant):
    m, reg = spectralize(build_model(ModelSpec()), variant)
    assert count_trainable(m) == HAND_COUNTS[variant] == sum(r.dim for r in reg)


def test_full_avf_fraction_below_two_percent():
    m, _ = spectralize(build_model(ModelSpec()), "full_avf")
    assert count_trainable(m) / count_total(m) < 0.02


@settings(max_examples=10, deadline=None)
@given(st.sampled_from(sorted(VARIANTS)), st.sampled_from(["mlp", "transformer"]))
def test_registry_membership_follows_variant_table(variant, arch):
    spec = ModelSpec(architecture=arch, hidden=8, heads=2, ffn=16, max_len=4)
    m, reg = spectralize(build_model(spec), variant)
    tags, bias = VARIANTS[variant]
    expected = set()
    for layer in spectral_layers(m):
        if layer.tag in tags:
            expected.add((layer.layer, layer.tag, "sigma"))
        if bias:
            expected.add((layer.layer, layer.tag, "bias"))
    assert {r.id for r in reg} == expected
    trainable = {n for n, t in m.named_parameters() if t.requires_grad}
    assert len(trainable) == len(reg)


@pytest.mark.parametrize("arch", ["mlp", "transformer"])
def test_spectralize_preserves_function(arch):
    spec = ModelSpec(architecture=arch)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((100, 2)) if arch == "mlp" else rng.integers(0, 96, (100, 8))
    dense = build_model(spec)
    before = dense(x).data.astype(np.float64)
    m, _ = spectralize(dense, "full_avf")
    after = m(x).data.astype(np.float64)
    assert np.abs(after - before).max() <= 1e-5 * np.abs(before).max()


def test_double_adaptation_rejected():
    m, _ = spectralize(build_model(ModelSpec(architecture="mlp")), "sigma")
    with pytest.raises(ContractError):
        spectralize(m, "sigma")
    with pytest.raises(ContractError):
        attach_lora(m, 2)


def test_frozen_model_counts_zero():
    m = build_model(ModelSpec(architecture="mlp"))
    m.freeze()
    assert count_trainable(m) == 0


def test_lora_param_count():
    spec = ModelSpec()
    m = attach_lora(build_model(spec), r=2)
    # per block: 4 attention (64x64) plus f1 (64->256) and f2 (256->64)
    per_block = 4 * 2 * (64 + 64) + 2 * 2 * (64 + 256)
    assert count_trainable(m) == spec.depth * per_block


def test_full_ft_and_bias_only():
    m = make_full_ft(build_model(ModelSpec(architecture="mlp")))
    assert count_trainable(m) == count_total(m)
    b = make_bias_only(build_model(ModelSpec(architecture="mlp", depth=2, hidden=8)))
    assert count_trainable(b) == 4 * 8
