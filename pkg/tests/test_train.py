import json
import math

import numpy as np
import pytest

from hvae.io import FormatError, load_checkpoint
from hvae.optim import Adamax, LRSchedule, OptimizerState
from hvae.train import RunLock, RunLockedError, Trainer, ablation_configs, latest_checkpoint, model_from_checkpoint

from conftest import tiny_run_config, toy_data


def test_lr_warmup_then_cosine():
    s = LRSchedule(max_lr=1.0, min_lr=0.1, warmup_steps=10, total_steps=110)
    assert s(1) == pytest.approx(0.1) and s(10) == pytest.approx(1.0)
    assert s(60) == pytest.approx(0.55)
    assert s(110) == pytest.approx(0.1) and s(500) == pytest.approx(0.1)
    lrs = [s(k) for k in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_adamax_first_step_example():
    opt = Adamax(schedule=LRSchedule(0.1, 0.1, 0, 10), ema_decay=0.5)
    p = {"w": np.array([1.0, -2.0])}
    state = OptimizerState.create(p)
    applied, norm, lr = opt.step(p, {"w": np.array([0.5, -4.0])}, state)
    assert applied and norm == pytest.approx(math.hypot(0.5, 4.0))
    # m = 0.1 g, u = |g|, bias 0.1: step = lr * g / |g| = lr * sign(g)
    assert np.allclose(p["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-8)
    assert np.allclose(state.ema["w"], 0.5 * np.array([1.0, -2.0]) + 0.5 * p["w"])


def test_adamax_infinity_norm_moment():
    opt = Adamax(schedule=LRSchedule(0.0, 0.0, 0, 10))
    p = {"w": np.zeros(1)}
    state = OptimizerState.create(p)
    for g in (3.0, 1.0):
        opt.step(p, {"w": np.array([g])}, state)
    assert state.u["w"][0] == pytest.approx(max(0.999 * 3.0, 1.0))


def test_skip_over_threshold_leaves_state_untouched():
    opt = Adamax(skip_threshold=1.0)
    p = {"w": np.array([1.0])}
    state = OptimizerState.create(p)
    applied, norm, _ = opt.step(p, {"w": np.array([5.0])}, state)
    assert not applied and norm == 5.0
    assert p["w"][0] == 1.0 and state.m["w"][0] == 0.0 and state.ema["w"][0] == 1.0
    assert state.step == 1 and state.applied == 0 and state.skips[0].step == 1


def test_non_finite_gradient_is_skipped():
    opt = Adamax()
    p = {"w": np.array([1.0])}
    state = OptimizerState.create(p)
    applied, norm, _ = opt.step(p, {"w": np.array([np.nan])}, state)
    assert not applied and math.isinf(norm) and p["w"][0] == 1.0


def test_run_lock(tmp_path):
    lock = RunLock(tmp_path).acquire()
    with pytest.raises(RunLockedError):
        RunLock(tmp_path).acquire()
    lock.release()
    RunLock(tmp_path).acquire().release()


def test_trainer_rejects_mismatched_data():
    with pytest.raises(ValueError, match="config expects"):
        Trainer(tiny_run_config(), toy_data(size=16))


def test_training_is_deterministic():
    def run():
        tr = Trainer(tiny_run_config(), toy_data())
        tr.train(4)
        return tr.model.state_arrays()

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_training_reduces_loss():
    cfg = tiny_run_config(iterations=60, batch_size=8, max_lr=3e-3, flip=False)
    tr = Trainer(cfg, toy_data(64))
    recs = tr.train()
    first = np.mean([r["loss"] for r in recs[:10]])
    last = np.mean([r["loss"] for r in recs[-10:]])
    assert last < first
    assert not any(r["skipped"] for r in recs)


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_run_config(iterations=10)
    data = toy_data()
    straight = Trainer(cfg, data)
    straight.train(10)

    with Trainer(cfg, data, tmp_path / "run") as first:
        first.train(6)
    with Trainer(cfg, data, tmp_path / "run") as second:
        assert second.step_count == 6
        second.train(10)
    for k, v in straight.model.state_arrays().items():
        assert second.model.state_arrays()[k].tobytes() == v.tobytes()
    for k, v in straight.state.ema.items():
        assert second.state.ema[k].tobytes() == v.tobytes()


def test_run_directory_contents(tmp_path):
    cfg = tiny_run_config(iterations=4, checkpoint_every=2, log_every=1)
    with Trainer(cfg, toy_data(), tmp_path) as tr:
        tr.train()
        with pytest.raises(RunLockedError):
            Trainer(cfg, toy_data(), tmp_path).open_run()
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["ckpt-00000002.hvck", "ckpt-00000004.hvck", "config.cfg", "metrics.jsonl"]
    recs = [json.loads(line) for line in (tmp_path / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2, 3, 4]
    assert set(recs[0]) >= {"loss", "recon", "rate", "kl", "lambda", "lr", "skipped", "grad_norm"}
    assert latest_checkpoint(tmp_path).name == "ckpt-00000004.hvck"
    model, ckpt = model_from_checkpoint(latest_checkpoint(tmp_path))
    for k, v in ckpt.opt_state.ema.items():
        assert np.array_equal(model.params[k].data, v)


def test_resume_rejects_different_model(tmp_path):
    cfg = tiny_run_config(iterations=2)
    with Trainer(cfg, toy_data(), tmp_path) as tr:
        tr.train()
    other = cfg.replace(z_channels=3)
    with pytest.raises(FormatError, match="shape"):
        Trainer(other, toy_data(), tmp_path).open_run()
    assert not (tmp_path / "LOCK").exists()


def test_checkpoint_restores_rng_stream(tmp_path):
    cfg = tiny_run_config()
    tr = Trainer(cfg, toy_data())
    tr.train(3)
    path = tr.save(tmp_path / "c.hvck")
    nxt = tr.sample_batch()[0]
    tr2 = Trainer(cfg, toy_data())
    tr2.restore(load_checkpoint(path, tr2.model))
    assert np.array_equal(tr2.sample_batch()[0], nxt)


def test_ablation_grid():
    grid = ablation_configs(tiny_run_config().replace(schedule="resolution"))
    assert set(grid) == {"gaussian+schedule", "gaussian", "dmol+schedule", "dmol"}
    assert grid["dmol+schedule"].model.output == "dmol"
    assert grid["gaussian+schedule"].model.schedule == "resolution"
    assert grid["gaussian"].model.schedule == "none"
    assert ablation_configs(tiny_run_config())["dmol+schedule"].model.schedule == "geometric"
