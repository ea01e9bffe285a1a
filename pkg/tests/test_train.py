import numpy as np
import pytest

from react_emg import backbone
from react_emg.config import desk_config
from react_emg.evaluate import EvalConfig
from react_emg.model import build_params
from react_emg.ndcore import Tensor
from react_emg.params import ParamSet
from react_emg.train import (NumericalError, OptimizerState, TrainConfig, WindowIndex,
                             adamw_step, adamw_update, augment, draw_shift, layerwise_lr,
                             lr_schedule, plan_steps, pose_loss, read_history, sample_order,
                             set_phase_trainable, train, write_history)


# ---------------------------------------------------------------- loss


def test_pose_loss_values(rng):
    gt = rng.normal(scale=0.3, size=(2, 5, 20))
    loss, parts = pose_loss(gt, gt)
    assert loss.item() == 0.0 and parts["valid"] == 10
    loss, _ = pose_loss(gt + 0.1, gt, fk_weight=0.0)
    assert loss.item() == pytest.approx(0.1, abs=1e-12)


def test_pose_loss_no_valid_frames(rng, caplog):
    pred = Tensor(rng.normal(size=(1, 4, 20)), requires_grad=True)
    loss, parts = pose_loss(pred, np.zeros((1, 4, 20)), np.zeros((1, 4), dtype=bool))
    assert loss.item() == 0.0 and parts["valid"] == 0
    assert "no valid" in caplog.text


def test_masked_frames_get_zero_gradient(rng):
    gt = rng.normal(scale=0.3, size=(2, 6, 20))
    mask = rng.random((2, 6)) > 0.4
    mask[0, 0] = True
    pred = Tensor(gt + rng.normal(scale=0.2, size=gt.shape), requires_grad=True)
    loss, _ = pose_loss(pred, gt, mask)
    loss.backward()
    assert np.all(pred.grad[~mask] == 0.0)
    assert np.any(pred.grad[mask] != 0.0)


def test_pose_loss_shape_check():
    with pytest.raises(ValueError):
        pose_loss(np.zeros((1, 3, 20)), np.zeros((1, 4, 20)))


# ---------------------------------------------------------------- optimizer


def test_adamw_first_step_example():
    theta, m, v = adamw_update(np.array(1.0), np.array(1.0), 0.0, 0.0, 1, 0.1)
    assert theta == pytest.approx(1 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert theta == pytest.approx(0.9, abs=1e-8)


def test_adamw_decay_only():
    theta, _, _ = adamw_update(np.array(2.0), np.array(0.0), 0.0, 0.0, 1, 0.1)
    assert theta == 2.0
    theta, _, _ = adamw_update(np.array(2.0), np.array(0.0), 0.0, 0.0, 1, 0.1, weight_decay=0.01)
    assert theta == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, abs=1e-15)


def test_adamw_step_respects_freeze_and_rejects_nan():
    ps = ParamSet()
    ps.add("a", np.ones(3), "encoder.conv")
    ps.add("b", np.ones(3), "conditioning")
    ps.freeze("encoder")
    for _, t in ps.items():
        t.grad = np.ones(3)
    state = adamw_step(ps, OptimizerState(), 0.1)
    np.testing.assert_array_equal(ps["a"].data, 1.0)
    assert np.all(ps["b"].data < 1.0) and state.step == 1
    ps["b"].grad = np.array([1.0, np.nan, 0.0])
    before = ps["b"].data.copy()
    with pytest.raises(NumericalError):
        adamw_step(ps, state, 0.1)
    np.testing.assert_array_equal(ps["b"].data, before)
    assert state.step == 1


def test_lr_schedule_boundaries():
    assert lr_schedule(249, 10_000, 1.0, 500) == 0.5
    assert lr_schedule(500, 10_000, 1.0, 500) == 1.0
    assert lr_schedule(10_000, 10_000, 1.0, 500) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        lr_schedule(0, 500, 1.0, 500)
    with pytest.raises(ValueError):
        lr_schedule(10_001, 10_000, 1.0, 500)


def test_layerwise_lr():
    assert layerwise_lr(0, 1e-4) == 1e-4
    assert layerwise_lr(3, 1e-4) == pytest.approx(1.25e-5, rel=1e-15)
    assert layerwise_lr(4, 1e-4, factor=1.0) == 1e-4
    rates = [layerwise_lr(d, 1e-4) for d in range(5)]
    assert all(a > b for a, b in zip(rates, rates[1:]))
    with pytest.raises(ValueError):
        layerwise_lr(-1, 1e-4)


# ---------------------------------------------------------------- augmentation


class _ZeroRng:
    def integers(self, lo, hi):
        return 0


def test_augment_zero_draw_is_identity(rng):
    x = rng.normal(size=(16, 10))
    out, shift = augment(x, _ZeroRng())
    assert shift == 0
    np.testing.assert_array_equal(out, x)


def test_augment_shift_frequencies():
    r = np.random.default_rng(0)
    counts = np.bincount([draw_shift(r) for _ in range(1600)], minlength=16)
    sigma = np.sqrt(1600 * (1 / 16) * (15 / 16))
    assert np.all(np.abs(counts - 100) <= 3 * sigma)


def test_bounded_shift_draws():
    r = np.random.default_rng(0)
    assert {draw_shift(r, 1) for _ in range(200)} == {15, 0, 1}


def test_eval_rejects_augmentation():
    with pytest.raises(ValueError, match="augment"):
        EvalConfig(augment=True)


# ---------------------------------------------------------------- config and planning


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(phase="phase3")
    with pytest.raises(ValueError):
        TrainConfig(modes=("bogus",))
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"nope": 1})
    cfg = TrainConfig(phase="phase2", augment_max_shift=1)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_plan_steps_and_order():
    tcfg = TrainConfig(epochs=2, batch_size=8, warmup_fraction=0.05)
    assert plan_steps(100, tcfg) == (25, 1)
    assert plan_steps(100, tcfg.replace(max_steps=10))[0] == 10
    order = sample_order(5, 12, seed=1)
    assert sorted(order[:5]) == list(range(5)) and sorted(order[5:10]) == list(range(5))
    assert order == sample_order(5, 12, seed=1)


def test_phase_trainable_sets():
    ps = build_params(desk_config())
    set_phase_trainable(ps, "phase1")
    assert {ps.group_of(n) for n, _ in ps.trainable()} == {"conditioning"}
    set_phase_trainable(ps, "pretrain")
    assert "conditioning" not in {ps.group_of(n) for n, _ in ps.trainable()}
    set_phase_trainable(ps, "phase2")
    assert len(ps.trainable()) == len(ps)


# ---------------------------------------------------------------- loop


def _short(phase, **kw):
    base = dict(phase=phase, epochs=1, batch_size=2, max_steps=3, warmup=1,
                window_stride=2000, augment_max_shift=1, base_lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_window_index_shapes(small_corpus, desk_cfg, rng):
    index = WindowIndex(small_corpus, small_corpus.split("train"), desk_cfg)
    b = index.batch([0, 1], rng, rotate=True, max_shift=1)
    assert b.emg.shape == (2, 16, desk_cfg.window_samples)
    assert b.pose.shape == (2, desk_cfg.content_frames, 20)
    assert all(s in (15, 0, 1) for s in b.shifts)


def test_phase1_keeps_backbone_and_moves_conditioning(small_corpus, desk_cfg):
    ps = build_params(desk_cfg, seed=1)
    back = ps.checksum(["encoder", "decoder"])
    cond = ps.checksum("conditioning")
    result = train(ps, desk_cfg, small_corpus, _short("phase1"))
    assert result.steps == 3 and len(result.history) == 3
    assert ps.checksum(["encoder", "decoder"]) == back
    assert ps.checksum("conditioning") != cond


def test_phase2_moves_every_group(small_corpus, desk_cfg):
    ps = build_params(desk_cfg, seed=1)
    before = {g: ps.checksum(g) for g in ps.groups()}
    train(ps, desk_cfg, small_corpus, _short("phase2", max_steps=2))
    for g in ps.groups():
        assert ps.checksum(g) != before[g], g


def test_training_is_bit_reproducible(small_corpus, desk_cfg, tmp_path):
    runs = []
    for _ in range(2):
        ps = build_params(desk_cfg, seed=2)
        res = train(ps, desk_cfg, small_corpus, _short("phase1", seed=4))
        runs.append((ps.checksum(), res.history))
    assert runs[0] == runs[1]
    write_history(tmp_path / "h.jsonl", runs[0][1])
    assert read_history(tmp_path / "h.jsonl") == runs[0][1]


def test_pretrain_leaves_conditioning(small_corpus, desk_cfg):
    ps = build_params(desk_cfg, seed=1)
    cond = ps.checksum("conditioning")
    res = train(ps, desk_cfg, small_corpus, _short("pretrain", modes=(backbone.TRACKING,)))
    assert ps.checksum("conditioning") == cond
    assert all("tracking_mae" in h and "regression_mae" not in h for h in res.history)
