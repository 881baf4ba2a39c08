import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from hyperrestormer.checkpoint import load_checkpoint, save_checkpoint
from hyperrestormer.config import ModelConfig, SlsstConfig
from hyperrestormer.degradations import DegradationSpec, bicubic_upsample, downsample_cube
from hyperrestormer.errors import ConfigurationError, CubeFormatError, NumericError
from hyperrestormer.model import build_model
from hyperrestormer.optim import AdamWParams, OptimizerState, cosine_lr, optimizer_step
from hyperrestormer.synthetic import SyntheticSceneSpec, synth_scene
from hyperrestormer.training import PairDataset, TrainConfig, _split, l1_loss, model_input, resume, train

CFG = ModelConfig(
    channels=4, embed_dim=8, n_stages=1, slsst=SlsstConfig(n_basis=16, basis_depths=(1, 1), abundance_depths=(1,), window_size=4)
)
NOISE = DegradationSpec(kind="noise", sigma_8bit=30, seed=1)


def cubes(n=6, size=16):
    return [synth_scene(SyntheticSceneSpec(seed=i, height=size, width=size, bands=4)) for i in range(n)]


def tcfg(**kw):
    base = dict(epochs=4, batch_size=2, weight_decay=0.01, degradation=NOISE, val_fraction=0.2, seed=3)
    base.update(kw)
    return TrainConfig(**base)


class Scalar(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.w = nn.Parameter(torch.tensor(float(value), dtype=torch.float64))


# --------------------------------------------------------------------------
# loss and schedule


def test_l1_examples():
    t = torch.rand(2, 3, 4, 4)
    assert l1_loss(t, t).item() == 0.0
    assert l1_loss(t + 0.5, t).item() == pytest.approx(0.5, abs=1e-7)


def test_l1_matches_scalar_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3, 3)), rng.standard_normal((2, 3, 3))
    ref = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert l1_loss(torch.from_numpy(a), torch.from_numpy(b)).item() == pytest.approx(ref, abs=1e-15)


def test_l1_shape_mismatch():
    with pytest.raises(ConfigurationError):
        l1_loss(torch.zeros(2, 2), torch.zeros(2, 3))


def test_cosine_schedule_values():
    assert cosine_lr(0, 1000, 3e-4, 1e-6) == pytest.approx(3e-4, abs=1e-18)
    assert cosine_lr(1000, 1000, 3e-4, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(500, 1000, 3e-4, 1e-6) == pytest.approx(1.505e-4, abs=1e-15)
    assert cosine_lr(5000, 1000, 3e-4, 1e-6) == 1e-6


@settings(max_examples=50, deadline=None)
@given(total=st.integers(1, 10_000), a=st.integers(0, 10_000), b=st.integers(0, 10_000))
def test_cosine_is_non_increasing(total, a, b):
    a, b = sorted((a % (total + 1), b % (total + 1)))
    assert cosine_lr(a, total) >= cosine_lr(b, total)


# --------------------------------------------------------------------------
# optimizer


def test_zero_gradient_zero_decay_is_identity():
    m = Scalar(0.7)
    m.w.grad = torch.zeros((), dtype=torch.float64)
    optimizer_step(m, OptimizerState(), 1e-3, AdamWParams(weight_decay=0.0))
    assert m.w.item() == 0.7


def test_first_step_moves_by_learning_rate():
    for g in (0.5, -3.0, 1e-3):
        m = Scalar(0.7)
        m.w.grad = torch.tensor(g, dtype=torch.float64)
        optimizer_step(m, OptimizerState(), 1e-3, AdamWParams(weight_decay=0.0))
        assert abs(abs(m.w.item() - 0.7) - 1e-3) <= 1e-6
        assert math.copysign(1, 0.7 - m.w.item()) == math.copysign(1, g)


def test_pure_decay_with_zero_gradient():
    m = Scalar(0.7)
    m.w.grad = torch.zeros((), dtype=torch.float64)
    optimizer_step(m, OptimizerState(), 1e-2, AdamWParams(weight_decay=0.1))
    assert m.w.item() == pytest.approx(0.7 * (1 - 1e-2 * 0.1), abs=1e-15)


def test_matches_reference_adamw_over_several_steps():
    torch.manual_seed(0)
    ours = nn.Linear(3, 2).double()
    ref = nn.Linear(3, 2).double()
    ref.load_state_dict(ours.state_dict())
    opt = torch.optim.AdamW(ref.parameters(), lr=1e-2, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
    state = OptimizerState()
    for step in range(5):
        x = torch.randn(4, 3, dtype=torch.float64)
        for mod in (ours, ref):
            mod.zero_grad()
            mod(x).pow(2).sum().backward()
        opt.step()
        optimizer_step(ours, state, 1e-2, AdamWParams(0.9, 0.999, 1e-8, 0.05))
    for a, b in zip(ours.parameters(), ref.parameters()):
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-14)


def test_non_finite_gradient_names_parameter_and_changes_nothing():
    m = nn.Linear(2, 2)
    before = {k: v.clone() for k, v in m.state_dict().items()}
    m.weight.grad = torch.full((2, 2), float("nan"))
    m.bias.grad = torch.zeros(2)
    with pytest.raises(NumericError, match="weight"):
        optimizer_step(m, OptimizerState(), 1e-3)
    assert all(torch.equal(before[k], v) for k, v in m.state_dict().items())


# --------------------------------------------------------------------------
# data plumbing


def test_split_holds_out_a_fraction_and_falls_back():
    train_idx, val_idx = _split(20, 0.05, seed=0)
    assert len(val_idx) == 1 and set(train_idx).isdisjoint(val_idx) and len(train_idx) == 19
    train_idx, val_idx = _split(3, 0.05, seed=0)
    assert train_idx == val_idx == [0, 1, 2]


def test_pairs_are_seeded_and_superres_is_pre_upsampled():
    data = cubes(2)
    a = PairDataset(data, NOISE).pair(1)
    b = PairDataset(data, NOISE).pair(1)
    assert np.array_equal(a[0], b[0])
    sr = DegradationSpec(kind="downsample", scale=4)
    x, clean, mask = PairDataset(data, sr).pair(0)
    assert mask is None and x.shape == clean.shape
    np.testing.assert_allclose(x, bicubic_upsample(downsample_cube(data[0], 4), 4), rtol=0, atol=1e-6)
    assert model_input(x, NOISE) is x


def test_resampling_draws_fresh_noise_per_epoch():
    ds = PairDataset(cubes(2), NOISE, resample=True)
    assert not np.array_equal(ds.pair(0, 0)[0], ds.pair(0, 1)[0])
    assert np.array_equal(ds.pair(0, 1)[0], PairDataset(cubes(2), NOISE, resample=True).pair(0, 1)[0])


def test_dataset_rejects_ragged_cubes():
    with pytest.raises(ConfigurationError):
        PairDataset([np.zeros((4, 16, 16)), np.zeros((4, 8, 8))], NOISE)


# --------------------------------------------------------------------------
# training loop


def test_frozen_model_has_constant_loss():
    model = build_model(CFG, seed=0)
    result = train(model, PairDataset(cubes(2), NOISE), tcfg(lr_max=0.0, lr_min=0.0, batch_size=2, val_fraction=0.0))
    assert len(set(result.step_losses)) == 1


def test_training_is_bit_deterministic():
    runs = [train(build_model(CFG, seed=0), PairDataset(cubes(), NOISE), tcfg()).step_losses for _ in range(2)]
    assert runs[0] == runs[1] and len(runs[0]) == 12


def test_run_directory_layout(tmp_path):
    train(build_model(CFG, seed=0), PairDataset(cubes(), NOISE), tcfg(checkpoint_every=2, eval_every=2), tmp_path)
    rows = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert rows[0].split("\t") == ["epoch", "lr", "train_l1", "val_mpsnr", "val_mssim", "val_sam"]
    assert len(rows) == 5
    assert rows[1].split("\t")[3] == "-" and rows[2].split("\t")[3] != "-"
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["epoch_00002.npz", "epoch_00004.npz", "final.npz"]
    assert json.loads((tmp_path / "train_config.json").read_text())["weight_decay"] == 0.01
    assert ModelConfig.from_dict(json.loads((tmp_path / "model_config.json").read_text())) == CFG


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tcfg(checkpoint_every=1)
    full = train(build_model(CFG, seed=0), PairDataset(cubes(), NOISE), cfg, tmp_path / "full")
    model, opt, history, stored = resume(tmp_path / "full" / "checkpoints" / "epoch_00002.npz")
    assert stored == cfg and model.step == 6
    resumed = train(model, PairDataset(cubes(), NOISE), stored, tmp_path / "resumed", opt, history)
    assert len(resumed.step_losses) == len(full.step_losses) == 12
    np.testing.assert_allclose(resumed.step_losses, full.step_losses, rtol=0, atol=1e-6)
    final_a = load_checkpoint(tmp_path / "full" / "checkpoints" / "final.npz").model.state_dict()
    for k, v in model.state_dict().items():
        torch.testing.assert_close(v, final_a[k], rtol=0, atol=1e-6)


def test_band_mismatch_rejected():
    with pytest.raises(ConfigurationError, match="bands"):
        train(build_model(CFG), PairDataset([np.zeros((5, 16, 16))], NOISE), tcfg())


def test_non_finite_loss_halts_and_keeps_last_checkpoint(tmp_path):
    good = PairDataset(cubes(), NOISE)
    cfg = tcfg(epochs=1, checkpoint_every=1)
    train(build_model(CFG, seed=0), good, cfg, tmp_path)
    ckpt = tmp_path / "checkpoints" / "epoch_00001.npz"
    saved = ckpt.read_bytes()
    poisoned = [c.copy() for c in cubes()]
    for c in poisoned:
        c[0, 0, 0] = np.nan
    model, opt, history, _ = resume(ckpt)
    with pytest.raises(NumericError, match="non-finite"):
        train(model, PairDataset(poisoned, NOISE), tcfg(epochs=2, checkpoint_every=1), tmp_path, opt, history)
    assert ckpt.read_bytes() == saved
    assert load_checkpoint(ckpt).model.step == 3


def test_stop_callback_ends_training_early():
    result = train(build_model(CFG), PairDataset(cubes(), NOISE), tcfg(epochs=10), stop=lambda r: len(r.epochs) >= 2)
    assert len(result.epochs) == 2 and len(result.step_losses) == 6


def test_train_config_round_trip_and_validation():
    cfg = tcfg(grad_clip=1.0, degradation=DegradationSpec(kind="stripes", seed=4))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in ({"lr_min": 1e-3, "lr_max": 1e-4}, {"epochs": 0}, {"val_fraction": 1.0}, {"learning_rate": 1}):
        with pytest.raises(ConfigurationError):
            TrainConfig.from_dict(bad)


# --------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build_model(CFG, seed=7)
    model.step = 42
    state = OptimizerState()
    for p in model.parameters():
        p.grad = torch.randn_like(p)
    optimizer_step(model, state, 1e-3)
    save_checkpoint(tmp_path / "c.npz", model, state, {"note": "x"})
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.model.config == CFG and ck.model.step == 42 and ck.model.seed == 7 and ck.meta["note"] == "x"
    for (ka, a), (kb, b) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert ka == kb and torch.equal(a, b)
    assert ck.opt_state.step == 1
    for k in state.exp_avg:
        assert torch.equal(state.exp_avg[k], ck.opt_state.exp_avg[k])
        assert torch.equal(state.exp_avg_sq[k], ck.opt_state.exp_avg_sq[k])


def test_save_load_then_step_equals_step_without_round_trip(tmp_path):
    model = build_model(CFG, seed=1, dtype=torch.float64)
    state = OptimizerState()
    x = torch.rand(4, 16, 16, dtype=torch.float64)

    def step(m, s):
        for p in m.parameters():
            p.grad = None
        m(x).abs().mean().backward()
        optimizer_step(m, s, 1e-3)

    step(model, state)
    save_checkpoint(tmp_path / "c.npz", model, state)
    ck = load_checkpoint(tmp_path / "c.npz")
    step(model, state)
    step(ck.model, ck.opt_state)
    for a, b in zip(model.parameters(), ck.model.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CubeFormatError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not a zip")
    with pytest.raises(CubeFormatError):
        load_checkpoint(tmp_path / "junk.npz")
    np.savez(tmp_path / "nometa.npz", a=np.zeros(2))
    with pytest.raises(CubeFormatError, match="metadata"):
        load_checkpoint(tmp_path / "nometa.npz")
