import csv

import numpy as np
import pytest
import torch

from caidd import trainer as trainer_mod
from caidd.checkpoint import load_checkpoint, save_checkpoint
from caidd.errors import ConfigError, NumericError
from caidd.losses import LossBreakdown
from caidd.trainer import (
    LOSS_COLUMNS,
    draw_timesteps,
    fit,
    init_state,
    load_dataset,
    lr_at,
    read_loss_log,
    state_from_checkpoint,
    state_to_checkpoint,
    train_step,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def data():
    return load_dataset(tiny_config())


def _losses(history):
    return [tuple(r[c] for c in LOSS_COLUMNS) for r in history]


def test_identical_seeds_identical_losses(data):
    cfg = tiny_config("steps=100")
    h1, h2 = [], []
    fit(data, cfg, history=h1)
    fit(data, cfg, history=h2)
    assert len(h1) == 100 and _losses(h1) == _losses(h2)


def test_different_seed_differs(data):
    h1, h2 = [], []
    fit(data, tiny_config("steps=3"), history=h1)
    fit(data, tiny_config("steps=3", "seed=1"), history=h2)
    assert _losses(h1) != _losses(h2)


def test_zero_weights_total_equals_diffusion(data):
    cfg = tiny_config("steps=5", "weights.lambda_id=0", "weights.lambda_parse=0", "weights.lambda_gaze=0")
    h = []
    fit(data, cfg, history=h)
    assert [r["l_total"] for r in h] == [r["l_diff"] for r in h]


def test_steps_zero(tmp_path, data):
    cfg = tiny_config("steps=0")
    ck = fit(data, cfg, out_dir=tmp_path)
    assert ck.step == 0 and ck.optimizer_state == {}
    rows = list(csv.reader((tmp_path / "losses.csv").open()))
    assert rows == [list(LOSS_COLUMNS)]
    assert (tmp_path / "final.ckpt").exists()


def test_warmup_schedule():
    cfg = tiny_config("steps=1000", "warmup_steps=40", "learning_rate=0.003")
    for k in range(1, 41):
        assert abs(lr_at(k, cfg) - 0.003 * k / 40) <= 1e-12
    assert lr_at(41, cfg) == lr_at(1000, cfg) == 0.003


def test_logged_lr_follows_warmup(data):
    h = []
    fit(data, tiny_config("steps=6", "warmup_steps=4", "learning_rate=0.01"), history=h)
    assert [r["lr"] for r in h] == [0.0025, 0.005, 0.0075, 0.01, 0.01, 0.01]


def test_image_size_mismatch_rejected_before_training():
    cfg = tiny_config("steps=5")
    with pytest.raises(ConfigError):
        fit(torch.zeros(2, 3, 32, 32), cfg)


def test_single_update_and_frozen_experts(data):
    cfg = tiny_config("steps=3")
    state = init_state(data, cfg)
    probe = data[:1].double()
    before = [t.clone() for t in state.experts.build_condition(probe).tensors()]
    expert_ids = {id(b) for b in state.experts.buffers()} | {id(p) for p in state.experts.parameters()}
    trainable = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    assert not expert_ids & trainable
    params0 = [p.detach().clone() for p in state.model.parameters()]
    _, bd = train_step(data[:2], state)
    assert state.step == 1
    steps = {float(s["step"]) for s in state.optimizer.state_dict()["state"].values()}
    assert steps == {1.0}
    assert any(not torch.equal(a, b) for a, b in zip(params0, state.model.parameters()))
    assert all(torch.isfinite(getattr(bd, f)) for f in LossBreakdown.FIELDS)
    after = state.experts.build_condition(probe).tensors()
    assert all(torch.equal(a, b) for a, b in zip(before, after))


def test_non_finite_activation_reports_step(data):
    state = init_state(data, tiny_config("steps=3"))
    with torch.no_grad():
        state.model.conv_in.weight.fill_(float("nan"))
    with pytest.raises(NumericError, match="step 1"):
        train_step(data[:2], state)


def test_non_finite_term_is_named(data, monkeypatch):
    real = trainer_mod.total_loss

    def broken(*a, **k):
        bd = real(*a, **k)
        bd.l_gaze = bd.l_gaze * float("nan")
        return bd

    monkeypatch.setattr(trainer_mod, "total_loss", broken)
    state = init_state(data, tiny_config("steps=3"))
    with pytest.raises(NumericError, match="l_gaze"):
        train_step(data[:2], state)


def test_timestep_draws_uniform_per_decile():
    g = torch.Generator().manual_seed(0)
    t = draw_timesteps(g, 100_000, 1000)
    assert int(t.min()) >= 1 and int(t.max()) <= 1000
    counts = np.histogram(t.numpy(), bins=10, range=(0.5, 1000.5))[0]
    assert np.all(np.abs(counts / 10_000 - 1) < 0.02), counts


def test_resume_matches_uninterrupted(tmp_path, data):
    cfg = tiny_config("steps=20", "checkpoint_every=10")
    full = []
    fit(data, cfg, out_dir=tmp_path / "a", history=full)
    resumed = []
    fit(data, cfg, out_dir=tmp_path / "b", resume=load_checkpoint(tmp_path / "a" / "ckpt_0000010.ckpt"), history=resumed)
    assert [r["step"] for r in resumed] == list(range(11, 21))
    for a, b in zip(full[10:], resumed):
        for c in LOSS_COLUMNS[1:]:
            assert abs(a[c] - b[c]) <= 1e-6


def test_save_load_continue_identical(tmp_path, data):
    cfg = tiny_config("steps=30")
    state = init_state(data, cfg)
    for _ in range(5):
        idx = trainer_mod._draw_indices(state)
        train_step(state.data[idx], state, state.bundles.index(idx))
    path = save_checkpoint(state_to_checkpoint(state), tmp_path / "mid.ckpt")
    clone = state_from_checkpoint(load_checkpoint(path), data)

    def run(s):
        out = []
        for _ in range(10):
            idx = trainer_mod._draw_indices(s)
            _, bd = train_step(s.data[idx], s, s.bundles.index(idx))
            out.append(bd.as_floats())
        return out

    assert run(state) == run(clone)


def test_checkpoint_resave_byte_identical(tmp_path, data):
    cfg = tiny_config("steps=4", "checkpoint_every=2")
    fit(data, cfg, out_dir=tmp_path)
    blob = (tmp_path / "final.ckpt").read_bytes()
    ck = load_checkpoint(tmp_path / "final.ckpt")
    save_checkpoint(ck, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == blob
    state = state_from_checkpoint(ck, data)
    assert state_to_checkpoint(state).params.keys() == ck.params.keys()
    save_checkpoint(state_to_checkpoint(state), tmp_path / "third.ckpt")
    assert (tmp_path / "third.ckpt").read_bytes() == blob


def test_loss_csv_and_validation_log(tmp_path, data):
    cfg = tiny_config("steps=6", "eval_every=3")
    h = []
    fit(data, cfg, out_dir=tmp_path, history=h)
    rows = read_loss_log(tmp_path / "losses.csv")
    assert [r["step"] for r in rows] == list(range(1, 7))
    assert all(rows[i][c] == h[i][c] for i in range(6) for c in LOSS_COLUMNS)
    val = list(csv.DictReader((tmp_path / "val.csv").open()))
    assert [int(v["step"]) for v in val] == [3, 6]
    assert (tmp_path / "config.resolved").exists()
