from fractions import Fraction

import numpy as np
import pytest

from vectorfit.analysis import (
    avf_ledger,
    delta_spectrum,
    sigma_variation,
    strength_heatmap,
    write_ledger_csv,
    write_variation_csv,
)
from vectorfit.avf import AVFConfig, training_strength
from vectorfit.errors import ContractError, ValidationError
from vectorfit.models import ModelSpec, build_model, spectral_layers
from vectorfit.trainer import RunHistory, TrainConfig, Trainer


def run(spec, data, steps=40, **kw):
    kw.setdefault("variant", "full_no_avf")
    tr = Trainer.create(spec, data, TrainConfig(max_steps=steps, lr=kw.pop("lr", 2e-2), **kw))
    init = tr.checkpoint()
    h = tr.run()
    return init, tr.checkpoint(), h, tr


def test_identical_checkpoints_give_zero_spectra(mlp_spec, blobs64):
    init, _, _, _ = run(mlp_spec, blobs64, steps=0)
    rep = delta_spectrum(init, init)
    assert all(s.rank == 0 and s.frob == 0 and not s.sigma.any() for s in rep.layers)
    assert all(not v.any() for v in sigma_variation(init, init).values())


def test_spectrum_symmetry_and_order(mlp_spec, blobs64):
    init, final, _, _ = run(mlp_spec, blobs64)
    a, b = delta_spectrum(init, final), delta_spectrum(final, init)
    for x, y in zip(a.layers, b.layers):
        np.testing.assert_allclose(x.sigma, y.sigma, atol=1e-12)
        assert np.all(np.diff(x.sigma) <= 0) and np.all(x.sigma >= 0)


def test_lora_ranks_capped(mlp_spec, blobs64):
    init, final, _, _ = run(mlp_spec, blobs64, mode="lora", lora_r=2)
    assert max(delta_spectrum(init, final).ranks().values()) <= 2


def test_dense_sigma_change_gives_full_rank(mlp_spec, blobs64):
    init, final, _, tr = run(mlp_spec, blobs64, variant="sigma")
    rep = delta_spectrum(init, final)
    for layer, s in zip(spectral_layers(tr.model), rep.layers):
        d = layer.sigma.data - layer.sigma0.data
        assert np.all(d != 0)
        assert s.rank == min(layer.d_in, layer.d_out)


def test_mismatched_checkpoints_rejected(mlp_spec, blobs64):
    a, *_ = run(mlp_spec, blobs64, steps=0)
    b, *_ = run(mlp_spec, blobs64, steps=0, variant="sigma")
    with pytest.raises(ValidationError):
        delta_spectrum(a, b)


def test_strength_heatmap_zero_cases(mlp_spec, blobs64):
    _, _, h, _ = run(mlp_spec, blobs64, steps=0)
    assert all(v == 0 for v in strength_heatmap(h).grid.values())
    _, _, h, _ = run(mlp_spec, blobs64, lr=0.0)
    grid = strength_heatmap(h).grid
    assert grid and all(v == 0 for v in grid.values())


def test_strength_heatmap_final_values(mlp_spec, blobs64, tmp_path):
    _, _, h, tr = run(mlp_spec, blobs64)
    rep = strength_heatmap(h)
    for r in tr.registry:
        assert rep.grid[r.id] == pytest.approx(training_strength(r.v0, r.current()))
    rep.write_csv(tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "step,layer,module,kind,S,S_ema,frozen"


def test_avf_lowers_mean_strength_on_paired_runs(mlp_spec, blobs64):
    _, _, h0, _ = run(mlp_spec, blobs64, steps=80, variant="full_no_avf")
    _, _, h1, _ = run(mlp_spec, blobs64, steps=80, variant="full_avf", avf=AVFConfig(10, 10, 6, k=4))
    assert strength_heatmap(h1).mean() <= strength_heatmap(h0).mean()


def test_variation_bump_and_consistency(mlp_spec, blobs64, tmp_path):
    init, final, _, tr = run(mlp_spec, blobs64, variant="sigma")
    bumped = type(init)(dict(init.meta), {k: v.copy() for k, v in init.arrays.items()})
    key = next(k for k in bumped.arrays if k.endswith("blocks.1.f1.sigma"))
    bumped.arrays[key][3] += 0.5
    grid = sigma_variation(init, bumped)
    expected = np.zeros(8)
    expected[3] = 0.5
    assert np.array_equal(grid[(1, "f1")], expected)
    assert not grid[(0, "f1")].any()
    full = sigma_variation(init, final)
    for r in tr.registry:
        if r.kind == "sigma":
            row = full[(r.layer, r.module)]
            assert np.abs(row).sum() == pytest.approx(r.dim * training_strength(r.v0, r.current()), rel=1e-12)
    write_variation_csv(tmp_path / "v.csv", full)
    assert (tmp_path / "v.csv").read_text().startswith("layer,module,index,delta_sigma\n")


def test_ledger_requires_gradient_log():
    with pytest.raises(ContractError):
        avf_ledger(RunHistory())


def test_ledger_k_zero_and_always_frozen(mlp_spec, blobs64):
    _, _, h, _ = run(mlp_spec, blobs64, optimizer="sgd", variant="full_avf", log_grads=True,
                     avf=AVFConfig(0, 5, 4, k=0))
    for row in avf_ledger(h):
        assert all(f == 0 for f in row.frozen_sum)
        assert all(row.applied == row.total)
    _, _, h, _ = run(mlp_spec, blobs64, steps=20, optimizer="sgd", variant="full_avf", log_grads=True,
                     avf=AVFConfig(0, 20, 1, k=100, release_after_final=False))
    for row in avf_ledger(h):
        assert all(a == 0 for a in row.applied)


@pytest.mark.parametrize("seed", range(3))
def test_ledger_identity_mixed_schedule(seed, mlp_spec, blobs64, tmp_path):
    rng = np.random.default_rng(seed)
    avf = AVFConfig(int(rng.integers(0, 10)), int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 8)))
    _, _, h, _ = run(mlp_spec, blobs64, optimizer="sgd", variant="full_avf", log_grads=True, avf=avf, seed=seed)
    rows = avf_ledger(h)
    assert any(any(f != 0 for f in r.frozen_sum) for r in rows)
    for r in rows:
        assert all(isinstance(x, Fraction) for x in r.applied)
        assert all(r.applied == r.total - r.frozen_sum)
    write_ledger_csv(tmp_path / "l.csv", rows)
    assert (tmp_path / "l.csv").read_text().startswith("layer,module,kind,total,frozen_sum,applied\n")


def test_ledger_survives_checkpoint_round_trip(mlp_spec, blobs64):
    from vectorfit.checkpoint import Checkpoint, from_bytes, to_bytes

    _, _, h, _ = run(mlp_spec, blobs64, optimizer="sgd", variant="full_avf", log_grads=True,
                     avf=AVFConfig(3, 4, 4, 3))
    arrays, meta = h.grad_log_arrays()
    back = from_bytes(to_bytes(Checkpoint(meta, arrays)))
    h2 = RunHistory.from_grad_log_arrays(back.arrays, back.meta)
    for a, b in zip(avf_ledger(h), avf_ledger(h2)):
        assert (a.layer, a.module, a.kind) == (b.layer, b.module, b.kind)
        assert all(a.applied == b.applied) and all(a.frozen_sum == b.frozen_sum)
