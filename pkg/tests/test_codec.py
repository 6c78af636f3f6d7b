import math

import numpy as np
import pytest
import torch

from didface.codec import (
    Codec,
    CodecConfig,
    DiagonalGaussian,
    QCStats,
    compute_qc_stats,
    load_codec,
    moment_stats,
    save_codec,
    to_distribution,
    train_codec,
)
from didface.errors import ConfigurationError, ShapeError


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return Codec(CodecConfig()).eval()


def test_encode_shape_and_determinism(codec, faces):
    x = torch.from_numpy(faces[:2].transpose(0, 3, 1, 2).copy())
    with torch.no_grad():
        a, b = codec.encode(x), codec.encode(x)
    assert a.shape == (2, 8, 8, 8)
    assert torch.equal(a, b)
    assert float(a[:, 4:].min()) >= -30 and float(a[:, 4:].max()) <= 20


def test_encode_wrong_resolution(codec):
    with pytest.raises(ShapeError):
        codec.encode(torch.zeros(1, 3, 48, 48))


def test_decode_shape_and_finite(codec):
    z = torch.zeros(1, 4, 8, 8)
    with torch.no_grad():
        a, b = codec.decode(z), codec.decode(z)
    assert a.shape == (1, 3, 64, 64)
    assert torch.isfinite(a).all() and torch.equal(a, b)
    assert float(a.abs().max()) <= 1.0


def test_decode_shape_mismatch(codec):
    with pytest.raises(ShapeError):
        codec.decode(torch.zeros(1, 4, 7, 8))


def test_distribution_unit_variance_sampling():
    m = torch.zeros(1, 8, 100, 100, dtype=torch.float64)
    d = to_distribution(m)
    s = d.sample(seed=0)
    # 10^4 draws of N(0,1); std of the sample std is about 1/sqrt(2N)
    assert abs(float(s.std()) - 1.0) < 3 / math.sqrt(2 * 10_000)
    assert float(d.kl_to_standard().sum()) == 0.0


def test_distribution_mode_and_floor():
    m = torch.randn(2, 8, 4, 4, dtype=torch.float64)
    assert torch.equal(to_distribution(m).mode(), m[:, :4])
    m[:, 4:] = -30.0
    d = DiagonalGaussian(m)
    assert float((d.sample(seed=1) - d.mode()).abs().max()) < 1e-3


def test_logvar_clamped():
    m = torch.zeros(1, 8, 2, 2)
    m[:, 4:] = 100.0
    assert float(DiagonalGaussian(m).logvar.max()) == 20.0


def test_kl_nonnegative():
    g = torch.Generator().manual_seed(3)
    m = torch.randn(1000, 8, 2, 2, generator=g, dtype=torch.float64) * 3
    assert float(DiagonalGaussian(m).kl_to_standard().min()) >= 0


def test_kl_matches_closed_form_scalar():
    m = torch.tensor([0.5, 0, 0, 0, math.log(2.0), 0, 0, 0], dtype=torch.float64).view(1, 8, 1, 1)
    expected = 0.5 * (0.25 + 2.0 - 1 - math.log(2.0))
    assert float(DiagonalGaussian(m).kl_to_standard()) == pytest.approx(expected, abs=1e-12)


def test_zero_steps_equals_init(faces):
    cfg = CodecConfig(steps=0)
    trained, losses = train_codec(faces, cfg)
    torch.manual_seed(cfg.seed)
    fresh = Codec(cfg)
    assert losses == []
    for k, v in fresh.state_dict().items():
        assert torch.equal(v, trained.state_dict()[k]), k


def test_short_training_deterministic_and_improves(faces):
    cfg = CodecConfig(steps=40, batch_size=4, seed=5)
    a, la = train_codec(faces, cfg)
    b, lb = train_codec(faces, cfg)
    assert la == lb
    assert a.fingerprint() == b.fingerprint()
    assert np.mean(la[-5:]) < np.mean(la[:5])


def test_train_empty_dataset():
    with pytest.raises(ConfigurationError):
        train_codec(np.zeros((0, 64, 64, 3), np.float32), CodecConfig(steps=1))


def test_checkpoint_round_trip(tmp_path, codec):
    save_codec(codec, tmp_path / "c.pt")
    back = load_codec(tmp_path / "c.pt")
    assert back.fingerprint() == codec.fingerprint()
    save_codec(back, tmp_path / "d.pt")
    assert (tmp_path / "c.pt").read_bytes() == (tmp_path / "d.pt").read_bytes()


def test_load_missing(tmp_path):
    with pytest.raises(ConfigurationError):
        load_codec(tmp_path / "nope.pt")


def test_stats_constant_image():
    m = np.zeros((1, 8, 8, 8))
    m[:, 2] = 0.7
    s = moment_stats(m)
    assert s.mu[2] == pytest.approx(0.7) and s.sigma[2] == 0.0
    assert s.divisor()[2] == 0.01


def test_stats_duplication_and_permutation():
    m = np.random.default_rng(0).normal(size=(5, 8, 8, 8))
    base = moment_stats(m)
    dup = moment_stats(np.concatenate([m, m]))
    perm = moment_stats(m[[3, 1, 4, 0, 2]])
    for other in (dup, perm):
        np.testing.assert_allclose(other.mu, base.mu, atol=1e-6)
        np.testing.assert_allclose(other.sigma, base.sigma, atol=1e-6)


def test_stats_two_pass_oracle():
    m = np.random.default_rng(1).normal(2.0, 3.0, size=(3, 8, 4, 4))
    s = moment_stats(m)
    for c in range(8):
        vals = [float(m[n, c, i, j]) for n in range(3) for i in range(4) for j in range(4)]
        mean = sum(vals) / len(vals)
        var = sum((v - mean) ** 2 for v in vals) / len(vals)
        assert s.mu[c] == pytest.approx(mean, abs=1e-6)
        assert s.sigma[c] == pytest.approx(math.sqrt(var), abs=1e-6)


def test_stats_file_round_trip(tmp_path, codec, faces):
    s = compute_qc_stats(faces, codec)
    assert s.count == len(faces) and s.codec_hash == codec.fingerprint()
    s.save(tmp_path / "s.json")
    back = QCStats.load(tmp_path / "s.json")
    np.testing.assert_array_equal(back.mu, s.mu)
    np.testing.assert_array_equal(back.sigma, s.sigma)
    assert back.codec_hash == s.codec_hash


def test_stats_empty(codec):
    with pytest.raises(ConfigurationError):
        compute_qc_stats(np.zeros((0, 64, 64, 3), np.float32), codec)
