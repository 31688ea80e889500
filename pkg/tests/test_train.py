import csv
import math

import numpy as np
import pytest
import torch

from posetransfer.config import TrainConfig
from posetransfer.data import batch_for_step, encode_records, load_dataset
from posetransfer.losses import LossWeights, l1_loss
from posetransfer.networks import GeneratorG1, merge
from posetransfer.train import (
    CheckpointError, TrainingDiverged, _adam, build_stage2_networks, evaluate, generate,
    load_checkpoint, load_generators, parameter_hash, restore_network, train_stage1, train_stage2,
)

from conftest import TOY_CANVAS, TOY_RADIUS, TOY_SIGMA


def cfg(**kw):
    base = dict(profile="market", image_size=TOY_CANVAS, width_divisor=16, batch_size=4,
                steps=6, sigma=TOY_SIGMA, dilate_radius=TOY_RADIUS, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def enc(small_toy_root):
    return encode_records(load_dataset(small_toy_root), TOY_SIGMA, TOY_RADIUS)


@pytest.fixture(scope="module")
def g1_ckpt(enc, tmp_path_factory):
    run = tmp_path_factory.mktemp("g1run")
    return train_stage1(cfg(steps=4), enc, run).checkpoint


def _log_rows(run_dir):
    with open(run_dir / "log.csv", newline="") as fh:
        return [{k: v for k, v in row.items() if k != "wall_time"} for row in csv.DictReader(fh)]


def test_zero_steps_checkpoint_is_initialization(enc, tmp_path):
    res = train_stage1(cfg(steps=0, seed=3), enc, tmp_path)
    torch.manual_seed(3)
    fresh = GeneratorG1("market", TOY_CANVAS, 16)
    assert parameter_hash(restore_network(load_checkpoint(res.checkpoint), "g1")) == parameter_hash(fresh)
    assert res.checkpoint.name == "step_0.ckpt"


def test_run_directory_layout(enc, tmp_path):
    train_stage1(cfg(steps=4, checkpoint_every=2), enc, tmp_path)
    assert (tmp_path / "config.json").exists()
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["step_2.ckpt", "step_4.ckpt"]
    assert (tmp_path / "samples" / "step_4.png").exists()
    rows = _log_rows(tmp_path)
    assert [int(r["step"]) for r in rows] == [0, 1, 2, 3]
    assert set(rows[0]) == {"step", "total", "l1", "bg"}


def test_log_every_thins_rows(enc, tmp_path):
    train_stage1(cfg(steps=5, log_every=2), enc, tmp_path)
    assert [int(r["step"]) for r in _log_rows(tmp_path)] == [0, 2, 4]


@pytest.mark.parametrize("stage", [1, 2])
def test_same_seed_identical_logs(enc, g1_ckpt, tmp_path, stage):
    for name in ("a", "b"):
        if stage == 1:
            train_stage1(cfg(), enc, tmp_path / name)
        else:
            train_stage2(cfg(stage=2), enc, g1_ckpt, tmp_path / name)
    assert _log_rows(tmp_path / "a") == _log_rows(tmp_path / "b")


@pytest.mark.parametrize("stage", [1, 2])
def test_resume_matches_uninterrupted(enc, g1_ckpt, tmp_path, stage):
    def run(config, run_dir, resume=None):
        if stage == 1:
            return train_stage1(config, enc, run_dir, resume)
        return train_stage2(config, enc, g1_ckpt, run_dir, resume)

    full = run(cfg(stage=stage, steps=6), tmp_path / "full")
    part = run(cfg(stage=stage, steps=3), tmp_path / "part")
    resumed = run(cfg(stage=stage, steps=6), tmp_path / "part", part.checkpoint)
    a, b = load_checkpoint(full.checkpoint), load_checkpoint(resumed.checkpoint)
    for key in a["networks"]:
        assert parameter_hash(restore_network(a, key)) == parameter_hash(restore_network(b, key))
    assert _log_rows(tmp_path / "full") == _log_rows(tmp_path / "part")


def test_resume_rejects_wrong_stage(enc, g1_ckpt, tmp_path):
    with pytest.raises(CheckpointError):
        train_stage2(cfg(stage=2), enc, g1_ckpt, tmp_path, resume_from=g1_ckpt)


def test_stage2_leaves_g1_untouched(enc, g1_ckpt, tmp_path):
    before = parameter_hash(restore_network(load_checkpoint(g1_ckpt), "g1"))
    res = train_stage2(cfg(stage=2, steps=3), enc, g1_ckpt, tmp_path)
    assert parameter_hash(res.networks["g1"]) == before
    assert parameter_hash(restore_network(load_checkpoint(res.checkpoint), "g1")) == before


def test_stage2_step0_is_coarse_image(enc, g1_ckpt):
    config = cfg(stage=2, steps=1)
    g1 = restore_network(load_checkpoint(g1_ckpt), "g1").eval()
    x, p, y, m = batch_for_step(enc, config.batch_size, config.seed, 0)
    g2, _, _ = build_stage2_networks(config)
    with torch.no_grad():
        y1 = g1(x, p)
        y_hat = merge(y1, g2(x, y1))
        expected_l1 = float(l1_loss(y, y1))
    assert torch.equal(y_hat, y1)
    res = train_stage2(config, enc, g1_ckpt)
    assert res.history[0]["l1"] == expected_l1


def test_stage2_without_adversary_is_supervised(enc, g1_ckpt):
    w = LossWeights(lambda_d1=0, lambda_d2=0)
    config = cfg(stage=2, steps=40, loss_weights=w, learning_rate=1e-3)
    _, d1_init, d2_init = build_stage2_networks(config)
    res = train_stage2(config, enc, g1_ckpt)
    l1 = [r["l1"] for r in res.history]
    first, last = np.mean(l1[:5]), np.mean(l1[-5:])
    assert last < first
    assert all(r["g_adv"] == 0 for r in res.history)
    # parameters only: BN running statistics still track the forward passes
    for trained, init in ((res.networks["d1"], d1_init), (res.networks["d2"], d2_init)):
        for a, b in zip(trained.parameters(), init.parameters()):
            assert torch.equal(a, b)


def test_stage2_requires_g1(enc):
    with pytest.raises(CheckpointError):
        train_stage2(cfg(stage=2), enc, None)


def test_non_finite_loss_aborts(enc):
    bad = type(enc)(enc.x, enc.p, enc.y.clone(), enc.mask)
    bad.y[:] = float("nan")
    with pytest.raises(TrainingDiverged) as err:
        train_stage1(cfg(), bad)
    assert err.value.step == 0
    assert set(err.value.components) == {"total", "l1", "bg"}


def test_adam_matches_update_formula():
    config = cfg(learning_rate=0.01, adam_beta1=0.5, adam_beta2=0.999)
    theta = torch.tensor([1.5], dtype=torch.float64, requires_grad=True)
    opt = _adam([theta], config)
    ref, m, v = 1.5, 0.0, 0.0
    b1, b2, lr, eps = 0.5, 0.999, 0.01, 1e-8
    for t in range(1, 8):
        opt.zero_grad()
        loss = (theta - 0.3) ** 2 * 3.0 + torch.sin(theta)
        loss.sum().backward()
        g = 6.0 * (ref - 0.3) + math.cos(ref)
        assert theta.grad.item() == pytest.approx(g, abs=1e-12)
        opt.step()
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert abs(theta.item() - ref) < 1e-12


def test_generate_merge_weights_and_determinism(enc, g1_ckpt, small_toy_root):
    g1, g2 = load_generators([g1_ckpt])
    assert g2 is None
    config = cfg(stage=2)
    g2, _, _ = build_stage2_networks(config)
    for prm in g2.parameters():
        torch.nn.init.normal_(prm, 0, 0.02)
    g2.eval()
    rec = load_dataset(small_toy_root)[0]
    x = enc.x[0].numpy()
    y1, y2, y = generate(g1, g2, x, rec.target_keypoints, TOY_SIGMA, (1.0, 0.0))
    assert torch.equal(y, torch.clamp(y1, -1, 1))
    assert not torch.equal(y2, torch.zeros_like(y2))
    again = generate(g1, g2, x, rec.target_keypoints, TOY_SIGMA, (1.0, 1.0))
    assert torch.equal(again[0], y1)
    with pytest.raises(CheckpointError):
        generate(g1, g2, np.zeros((3, 32, 16), np.float32), rec.target_keypoints, TOY_SIGMA)


def test_evaluate_keys(enc, g1_ckpt):
    g1, _ = load_generators([g1_ckpt])
    out = evaluate(enc, g1)
    assert set(out) == {"l1_coarse", "masked_l1_coarse"}
    assert out["masked_l1_coarse"] <= out["l1_coarse"]
