import numpy as np
import pytest
import torch

from didface.codec import Codec, CodecConfig, QCStats, compute_qc_stats
from didface.errors import ConfigurationError, ParameterError, ShapeError
from didface.trainer import (
    StageCheckpoint,
    Stage2Log,
    TrainConfig,
    new_denoiser,
    read_training_log,
    restore,
    synthesize_stage1,
    train_stage1,
    train_stage2,
    write_training_log,
)

SMALL = dict(widths=(16, 32), batch_size=2, sampler_steps=4, timesteps=100, learning_rate=1e-3)


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return Codec(CodecConfig()).eval()


@pytest.fixture(scope="module")
def stats(codec, faces):
    return compute_qc_stats(faces, codec)


@pytest.fixture(scope="module")
def stage1(faces, codec, stats):
    return train_stage1(faces, codec, stats, TrainConfig(stage=1, iterations=3, **SMALL))


@pytest.fixture(scope="module")
def stage1_out(stage1, codec, faces):
    return synthesize_stage1(stage1, codec, faces, steps=4, seed=0)


@pytest.fixture(scope="module")
def stage2(faces, stage1_out, stage1, codec, stats):
    return train_stage2(faces, stage1_out, stage1, codec, stats, TrainConfig(stage=2, iterations=3, **SMALL))


def _state(ck):
    return ck.tensors()


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.lambda_info, c.lambda_rec, c.sampler_steps) == (2, 1e-4, 0.001, 1.0, 50)


@pytest.mark.parametrize("kw", [dict(stage=3), dict(iterations=-1), dict(batch_size=0), dict(source="x"), dict(learning_rate=0)])
def test_config_validation(kw):
    with pytest.raises(ParameterError):
        TrainConfig(**kw)


def test_zero_iterations_equals_init(faces, codec, stats):
    cfg = TrainConfig(stage=1, iterations=0, **SMALL)
    ck = train_stage1(faces, codec, stats, cfg)
    fresh = new_denoiser(cfg, stats)
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, ck.denoiser.state_dict()[k]), k
    assert ck.log == []


def test_stage1_deterministic_and_codec_untouched(faces, codec, stats, stage1):
    before = codec.fingerprint()
    again = train_stage1(faces, codec, stats, TrainConfig(stage=1, iterations=3, **SMALL))
    assert [r["ldm"] for r in again.log] == [r["ldm"] for r in stage1.log]
    assert all(torch.equal(v, again.tensors()[k]) for k, v in stage1.tensors().items())
    assert codec.fingerprint() == before
    assert all(r["total"] == r["ldm"] for r in stage1.log)


def test_stage1_missing_artifacts(faces, codec, stats):
    with pytest.raises(ConfigurationError):
        train_stage1(faces, None, stats, TrainConfig(iterations=1, **SMALL))
    with pytest.raises(ConfigurationError):
        train_stage1(faces, codec, None, TrainConfig(iterations=1, **SMALL))
    foreign = QCStats(stats.mu, stats.sigma, stats.count, codec_hash="0" * 64)
    with pytest.raises(ConfigurationError):
        train_stage1(faces, codec, foreign, TrainConfig(iterations=1, **SMALL))


def test_stage1_wrong_resolution(codec, stats):
    with pytest.raises(ShapeError):
        train_stage1(np.zeros((2, 32, 32, 3), np.float32), codec, stats, TrainConfig(iterations=1, **SMALL))


def test_synthesis_shapes_and_determinism(stage1, codec, faces, stage1_out):
    assert stage1_out.shape == faces.shape
    assert np.array_equal(stage1_out, synthesize_stage1(stage1, codec, faces, steps=4, seed=0))
    # per-image seeds: a sub-batch reproduces its slice of the full batch
    np.testing.assert_allclose(synthesize_stage1(stage1, codec, faces[:3], steps=4, seed=0), stage1_out[:3], atol=1e-5)


def test_stage2_bookkeeping(stage2):
    for row in stage2.log:
        rec = Stage2Log(**row)
        assert abs(rec.recombined(0.001, 1.0) - rec.total) <= 1e-6


def test_stage2_without_penalties_is_ldm_only(faces, stage1_out, stage1, codec, stats):
    ck = train_stage2(
        faces, stage1_out, stage1, codec, stats, TrainConfig(stage=2, iterations=2, lambda_info=0.0, lambda_rec=0.0, **SMALL)
    )
    assert all(row["total"] == row["ldm"] for row in ck.log)


def test_stage2_warm_start(faces, stage1_out, stage1, codec, stats):
    ck = train_stage2(faces, stage1_out, stage1, codec, stats, TrainConfig(stage=2, iterations=0, **SMALL))
    for k, v in stage1.denoiser.state_dict().items():
        assert torch.equal(v, ck.denoiser.state_dict()[k])
    cold = train_stage2(faces, stage1_out, stage1, codec, stats, TrainConfig(stage=2, iterations=0, warm_start=False, **SMALL))
    assert not all(torch.equal(v, cold.denoiser.state_dict()[k]) for k, v in stage1.denoiser.state_dict().items())


def test_stage2_needs_stage1_outputs(faces, stage1, codec, stats):
    with pytest.raises(ConfigurationError):
        train_stage2(faces, None, stage1, codec, stats, TrainConfig(stage=2, iterations=1, **SMALL))


@pytest.mark.parametrize("mode", ["off", "none", "noise"])
def test_ablation_modes_train(faces, stage1_out, stage1, codec, stats, mode):
    ck = train_stage2(faces, stage1_out, stage1, codec, stats, TrainConfig(stage=2, iterations=2, compensation=mode, **SMALL))
    assert all(np.isfinite(row["total"]) for row in ck.log)
    if mode == "off":
        assert all(row["info"] == 0.0 for row in ck.log)


def test_no_stage1_ablation(faces, codec, stats):
    cfg = TrainConfig(stage=2, iterations=2, source="lq", **SMALL)
    ck = train_stage2(faces, None, None, codec, stats, cfg)
    out = restore(faces[:2], None, ck, codec, steps=4, seed=0)
    assert out.shape == (2, 64, 64, 3)


def test_restore_deterministic_and_identity_sensitive(faces, stage1, stage2, codec):
    a = restore(faces[:2], stage1, stage2, codec, steps=4, seed=3)
    b = restore(faces[:2], stage1, stage2, codec, steps=4, seed=3)
    assert a.shape == (2, 64, 64, 3) and np.isfinite(a).all()
    assert np.array_equal(a, b)
    single = restore(faces[0], stage1, stage2, codec, steps=4, seed=3)
    assert single.shape == (64, 64, 3)
    e = np.eye(128, dtype=np.float32)
    # the fresh bottleneck mapping is not zero, so identity changes the conditioning
    x = restore(faces[:1], stage1, stage2, codec, steps=4, seed=3, id_override=e[0])
    y = restore(faces[:1], stage1, stage2, codec, steps=4, seed=3, id_override=e[1])
    assert np.abs(x - y).max() > 0


def test_restore_errors(faces, stage1, stage2, codec):
    with pytest.raises(ShapeError):
        restore(np.zeros((1, 32, 32, 3), np.float32), stage1, stage2, codec, steps=4)
    with pytest.raises(ConfigurationError):
        restore(faces[:1], None, stage2, codec, steps=4)


def test_checkpoint_round_trip(tmp_path, stage1, stage2, stats):
    stage1.save(tmp_path / "s1.pt")
    stage2.save(tmp_path / "s2.pt")
    b1 = StageCheckpoint.load(tmp_path / "s1.pt", stage=1)
    b2 = StageCheckpoint.load(tmp_path / "s2.pt", stats=stats, stage=2)
    assert all(torch.equal(v, b1.tensors()[k]) for k, v in stage1.tensors().items())
    assert all(torch.equal(v, b2.tensors()[k]) for k, v in stage2.tensors().items())
    assert b2.config == stage2.config and b2.iteration == 3
    b1.save(tmp_path / "again.pt")
    assert (tmp_path / "again.pt").read_bytes() == (tmp_path / "s1.pt").read_bytes()
    with pytest.raises(ConfigurationError):
        StageCheckpoint.load(tmp_path / "s1.pt", stage=2)
    with pytest.raises(ConfigurationError):
        StageCheckpoint.load(tmp_path / "s2.pt")


def test_training_log_round_trip(tmp_path, stage2):
    write_training_log(tmp_path / "log.jsonl", stage2.log)
    assert read_training_log(tmp_path / "log.jsonl") == stage2.log
    assert set(stage2.log[0]) == {"iteration", "ldm", "info", "rec", "total"}
