import math

import numpy as np
import pytest
import torch

from mrirestore.degrade import SrPairSpec, build_sr_dataset
from mrirestore.imgcore import make_subject
from mrirestore.model import ModelConfig, build_model
from mrirestore.motion import MotionDatasetConfig, build_mar_dataset, read_plans
from mrirestore.objectives import LossWeights
from mrirestore.trainer import (
    TrainConfig,
    TrainingError,
    evaluate,
    load_checkpoint,
    lr_at,
    make_optimizer,
    train,
)


@pytest.fixture(scope="module")
def sr_records(tmp_path_factory):
    # 1 training subject x 2 slices x 4 patches x 4 rotations = 32 training pairs
    vols = {f"s{i}": make_subject(5, i, n_slices=2, size=32) for i in range(3)}
    return build_sr_dataset(vols, SrPairSpec(2, 16, 16), tmp_path_factory.mktemp("sr"), (1, 1, 1),
                            seed=0, roi=None)


@pytest.fixture(scope="module")
def mar_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("mar")
    vols = {f"s{i}": make_subject(6, i, n_slices=2, size=32) for i in range(3)}
    recs = build_mar_dataset(vols, root, MotionDatasetConfig(variants=3, split=(1, 1, 1), seed=2))
    return recs, read_plans(root / "plans.jsonl")


def params(net):
    return {k: v.clone() for k, v in net.state_dict().items()}


def same(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def test_lr_schedule_values():
    cfg = TrainConfig(epochs=60)
    assert lr_at(0, cfg) == pytest.approx(2e-5)
    assert lr_at(4, cfg) == pytest.approx(1e-4)
    assert lr_at(7, cfg) == pytest.approx(1e-4)
    assert lr_at(15, cfg) == pytest.approx(5e-5)
    assert lr_at(25, cfg) == pytest.approx(2.5e-5)
    with pytest.raises(ValueError):
        lr_at(60, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(precision="f16")
    assert TrainConfig(precision="f64").dtype == torch.float64


def test_zero_gradient_adam_step_is_noop():
    net = build_model(ModelConfig.toy(), 0)
    before = params(net)
    opt = make_optimizer(net, TrainConfig())
    for p in net.parameters():
        p.grad = torch.zeros_like(p)
    opt.step()
    assert same(before, params(net))


def test_smoke_run_loss_decreases(sr_records):
    net = build_model(ModelConfig.toy(), 0)
    log = train(net, sr_records, LossWeights.preset("R4"), TrainConfig(epochs=2, seed=0, base_lr=1e-3))
    assert [r.epoch for r in log.records] == [0, 1]
    assert log.records[1].train["total"] < log.records[0].train["total"]
    assert 0 <= log.best_epoch <= 1


def test_training_is_deterministic(sr_records):
    runs = []
    for _ in range(2):
        net = build_model(ModelConfig.toy(), 3)
        train(net, sr_records, LossWeights.preset("R4"), TrainConfig(epochs=1, seed=3))
        runs.append(params(net))
    assert same(*runs)


def test_validation_does_not_touch_parameters(sr_records):
    a, b = build_model(ModelConfig.toy(), 1), build_model(ModelConfig.toy(), 1)
    train(a, sr_records, LossWeights.preset("R2"), TrainConfig(epochs=1, seed=1), validate=True)
    train(b, sr_records, LossWeights.preset("R2"), TrainConfig(epochs=1, seed=1), validate=False)
    assert same(params(a), params(b))


def test_resume_matches_uninterrupted(sr_records, tmp_path):
    cfg = TrainConfig(epochs=2, seed=4)
    full = build_model(ModelConfig.toy(), 4)
    train(full, sr_records, LossWeights.preset("R3"), cfg, tmp_path / "full")
    part = build_model(ModelConfig.toy(), 4)
    train(part, sr_records, LossWeights.preset("R3"), TrainConfig(epochs=1, seed=4), tmp_path / "part")
    resumed = build_model(ModelConfig.toy(), 99)
    log = train(resumed, sr_records, LossWeights.preset("R3"), cfg, tmp_path / "res",
                resume=tmp_path / "part" / "epoch_000.pt")
    assert same(params(full), params(resumed))
    assert [r.epoch for r in log.records] == [0, 1]


def test_checkpoint_roundtrip(sr_records, tmp_path):
    net = build_model(ModelConfig.toy(), 2)
    train(net, sr_records, LossWeights.preset("R4"), TrainConfig(epochs=1, seed=2), tmp_path)
    back, state = load_checkpoint(tmp_path / "epoch_000.pt")
    assert same(params(net), params(back))
    assert back.cfg == net.cfg and state["epoch"] == 0
    assert (tmp_path / "best.pt").exists() and (tmp_path / "runlog.json").exists()
    (tmp_path / "bad.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.pt")


def test_non_finite_loss_names_the_batch(sr_records):
    net = build_model(ModelConfig.toy(), 0)
    with torch.no_grad():
        net.head.bias.fill_(math.nan)
    with pytest.raises(TrainingError, match="non-finite loss at epoch 0, batch 0"):
        train(net, sr_records, LossWeights.preset("R2"), TrainConfig(epochs=1), validate=False)


def test_scale_mismatch_rejected(sr_records):
    net = build_model(ModelConfig.toy(sr_factor=4), 0)
    with pytest.raises(TrainingError):
        train(net, sr_records, LossWeights.preset("R2"), TrainConfig(epochs=1))


def test_identity_mar_equals_baseline(mar_data):
    recs, plans = mar_data
    net = build_model(ModelConfig.toy(task="MAR", sr_factor=1, zero_tail=True, global_skip=True), 0)
    rep = evaluate(net, recs, "test", plans=plans)
    for row in rep.per_image:
        assert row["ssim"] == row["base_ssim"] and row["psnr"] == row["base_psnr"]
    assert rep.buckets
    assert sum(b["n"] for b in rep.buckets.values()) == len(rep.per_image)
    text = rep.format()
    assert text.splitlines()[0] == "metric\tmean\tstd\tn"
    assert "severity_bucket" in text


def test_sr_eval_stitched_and_per_patch_agree_on_shape(sr_records):
    net = build_model(ModelConfig.toy(), 0)
    per_patch = evaluate(net, sr_records, "test")
    stitched = evaluate(net, sr_records, "test", stitch=True)
    assert len(per_patch.per_image) == 8 and len(stitched.per_image) == 2
    assert all(np.isfinite(r["base_ssim"]) for r in stitched.per_image)
