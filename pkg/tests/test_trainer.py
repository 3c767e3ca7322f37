import json

import numpy as np
import pytest

from icvit import numkernel as nk
from icvit import trainer, vit
from icvit.data import SyntheticSpec, checkpoint_from_bytes, checkpoint_to_bytes, generate_synthetic, make_batches
from icvit.errors import ConfigError
from icvit.sampling import ChannelMask, SamplingStrategy
from icvit.trainer import EpochCheckpoint, TrainConfig, lr_at, select_best

CFG = vit.ViTConfig()


@pytest.fixture(scope="module")
def splits():
    d = generate_synthetic(SyntheticSpec(n_train=256, n_val=96, n_test=400), 0)
    m, s = d["train"].mean, d["train"].std
    return {k: v.normalized(m, s) for k, v in d.items()}


def test_lr_schedule():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(10, 100, 10, 1e-3) == pytest.approx(1e-3)
    assert lr_at(55, 100, 10, 1e-3) == pytest.approx(0.5e-3, abs=1e-9)
    assert lr_at(100, 100, 10, 1e-3) == 0.0
    assert lr_at(5, 100, 0, 1e-3) <= 1e-3


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=2, warmup_epochs=3)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)


def test_select_best_rules():
    ck = [EpochCheckpoint(0, {}, 0.3), EpochCheckpoint(1, {}, 0.7), EpochCheckpoint(2, {}, 0.7)]
    assert select_best(ck).epoch == 1
    assert select_best(ck[:1]).epoch == 0
    with pytest.raises(ValueError):
        select_best([])


def test_select_best_reevaluates_to_recorded(splits):
    params = vit.init_params(CFG, 0)
    rng = np.random.default_rng(0)
    params["head.w"].data[...] = rng.standard_normal(params["head.w"].shape)
    snap = trainer.snapshot(params)
    best = select_best([EpochCheckpoint(0, snap, None)], splits["val"], params, CFG)
    trainer.restore(params, best.params)
    assert trainer.evaluate(params, CFG, splits["val"]) == best.val_acc


def test_random_model_is_at_chance(splits):
    params = vit.init_params(CFG, 1)
    params["head.w"].data[...] = np.random.default_rng(1).standard_normal(params["head.w"].shape)
    acc = trainer.evaluate(params, CFG, splits["test"])
    n, p = len(splits["test"]), 1 / 16
    assert abs(acc - p) <= 3 * np.sqrt(p * (1 - p) / n) + 1 / 16  # chance-level band; predictions may pile on a class
    assert trainer.evaluate(params, CFG, splits["test"]) == acc


def test_full_mask_matches_default(splits):
    params = vit.init_params(CFG, 2)
    params["head.w"].data[...] = np.random.default_rng(2).standard_normal(params["head.w"].shape)
    a = trainer.evaluate(params, CFG, splits["val"])
    b = trainer.evaluate(params, CFG, splits["val"], ChannelMask.full(8))
    assert a == b
    with pytest.raises(ValueError):
        trainer.evaluate(params, CFG, splits["val"], ChannelMask((False,) * 8))


def test_zero_lr_step_changes_only_optimizer(splits):
    params = vit.init_params(CFG, 0)
    before = trainer.snapshot(params)
    st = trainer.TrainerState(optimizer=nk.AdamWState.zeros_like(params))
    b = next(make_batches(splits["train"], 16, SamplingStrategy.full(), np.random.default_rng(0)))
    trainer.finetune_step(b, params, st, CFG, 0.0, TrainConfig())
    for k in params:
        np.testing.assert_array_equal(params[k].data, before[k])
    assert st.optimizer.step == 1 and any(np.abs(m).sum() > 0 for m in st.optimizer.m.values())


def test_overfit_small_set(splits):
    small = splits["train"].subset(np.arange(32))
    params = vit.init_params(CFG, 0)
    st = trainer.TrainerState(optimizer=nk.AdamWState.zeros_like(params))
    tcfg = TrainConfig(weight_decay=0.0)
    full = SamplingStrategy.full()
    for i in range(200):
        for b in make_batches(small, 32, full, nk.make_rng(0, "overfit", i)):
            trainer.finetune_step(b, params, st, CFG, 2e-3, tcfg)
    assert trainer.evaluate(params, CFG, small) == 1.0


def test_resume_reproduces_trajectory(splits):
    tcfg = TrainConfig()
    batches = list(make_batches(splits["train"], 32, SamplingStrategy.full(), np.random.default_rng(0)))[:6]

    def run(params, st, bs):
        return [trainer.finetune_step(b, params, st, CFG, 1e-3, tcfg) for b in bs]

    params = vit.init_params(CFG, 0)
    st = trainer.TrainerState(optimizer=nk.AdamWState.zeros_like(params))
    straight = run(params, st, batches)

    params = vit.init_params(CFG, 0)
    st = trainer.TrainerState(optimizer=nk.AdamWState.zeros_like(params))
    first = run(params, st, batches[:3])
    tens, meta = trainer.state_tensors(params, st)
    tens, meta = checkpoint_from_bytes(checkpoint_to_bytes(tens, meta))
    params2, st2 = trainer.state_from_tensors(tens, meta)
    second = run(params2, st2, batches[3:])
    np.testing.assert_allclose(first + second, straight, rtol=0, atol=1e-5)


def test_fit_logs_and_selects_best(splits, tmp_path):
    log = tmp_path / "ft.jsonl"
    res = trainer.fit(CFG, TrainConfig(epochs=2, warmup_epochs=1), splits["train"], splits["val"], splits["test"],
                      log_path=str(log))
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["epoch"] for r in lines] == [0, 1]
    assert set(lines[0]) == {"epoch", "step", "train_loss", "val_acc", "lr"}
    assert res.best_val_acc == max(r["val_acc"] for r in lines)
    assert res.best_epoch == min(r["epoch"] for r in lines if r["val_acc"] == res.best_val_acc)
    assert trainer.evaluate(res.params, CFG, splits["val"]) == res.best_val_acc


def test_loss_decreases_during_warmup():
    # about a hundred warmup steps; far fewer leave a zero-initialised head at ln K
    d = generate_synthetic(SyntheticSpec(n_train=1504, n_val=64, n_test=0), 4)
    tr, va = d["train"].normalized(), d["val"].normalized(d["train"].mean, d["train"].std)
    drops = []
    for seed in range(5):
        losses = []
        trainer.fit(CFG, TrainConfig(epochs=2, warmup_epochs=2, batch_size=32, seed=seed), tr, va,
                    on_epoch=lambda r: losses.append(r["train_loss"]))
        drops.append(losses[0] - losses[-1])
    assert np.median(drops) > 0


def test_pretrained_backbone_needs_no_new_backbone_params():
    from icvit import dino

    st = dino.init_state(CFG, dino.DinoConfig(), 0)
    params = vit.init_params(CFG, 0)
    fresh = trainer.load_backbone(params, dino.backbone_tensors(st))
    assert fresh == ["head.w", "head.b"]


def test_standard_model_masks_by_zeroing(splits):
    cfg = vit.ViTConfig(patchify="standard")
    params = vit.init_params(cfg, 0)
    params["head.w"].data[...] = np.random.default_rng(0).standard_normal(params["head.w"].shape)
    mask = ChannelMask.from_indices([0, 1], 8)
    zeroed = splits["val"].pixels * np.array(mask.bits, np.float32)
    ref = vit.forward_logits(zeroed, params, cfg).data.argmax(1)
    np.testing.assert_array_equal(trainer.predict(params, cfg, splits["val"], mask), ref)
