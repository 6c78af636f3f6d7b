import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from didface.codec import QCStats
from didface.errors import DomainError, ShapeError
from didface.mib import (
    InformationBottleneck,
    MIBConfig,
    fuse,
    identity_inject,
    info_loss,
    info_loss_elementwise,
    info_loss_grad,
    instance_normalize_manifold,
    normalize_manifold,
    rec_loss,
)

# -ln(0.25) + 0.5 * (0.25 - 1)
INFO_AT_HALF = 1.0112943611198906


def _stats(mu=None, sigma=None):
    mu = np.arange(8, dtype=np.float64) * 0.1 if mu is None else mu
    sigma = np.linspace(0.5, 2.0, 8) if sigma is None else sigma
    return QCStats(mu=mu, sigma=sigma, count=4)


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def test_normalize_at_mean_is_zero():
    s = _stats()
    manifold = _t(np.broadcast_to(s.mu[None, :, None, None], (1, 8, 3, 3)).copy())
    assert torch.count_nonzero(normalize_manifold(manifold, s)) == 0


def test_normalize_floor():
    sigma = np.ones(8)
    sigma[3] = 0.0
    s = _stats(mu=np.zeros(8), sigma=sigma)
    manifold = torch.ones(1, 8, 2, 2, dtype=torch.float64)
    out = normalize_manifold(manifold, s)
    assert float(out[0, 3, 0, 0]) == pytest.approx(1.0 / 0.01)
    assert float(out[0, 0, 0, 0]) == pytest.approx(1.0)


def test_normalize_scalar_oracle():
    s = _stats()
    manifold = np.random.default_rng(0).normal(size=(2, 8, 3, 3))
    got = normalize_manifold(_t(manifold), s).numpy()
    expected = np.empty_like(manifold)
    for n, c, i, j in np.ndindex(*manifold.shape):
        expected[n, c, i, j] = (manifold[n, c, i, j] - s.mu[c]) / max(s.sigma[c], 0.01)
    np.testing.assert_allclose(got, expected, atol=1e-6)


def test_instance_normalize_variant():
    manifold = _t(np.random.default_rng(1).normal(3.0, 2.0, size=(1, 8, 4, 4)))
    out = instance_normalize_manifold(manifold)
    torch.testing.assert_close(out.mean(dim=(-2, -1)), torch.zeros(1, 8, dtype=torch.float64), atol=1e-9, rtol=0)


def test_identity_inject_cases():
    normed = _t(np.random.default_rng(2).normal(size=(2, 8, 3, 3)))
    ones, zeros = torch.ones(2, 8, dtype=torch.float64), torch.zeros(2, 8, dtype=torch.float64)
    torch.testing.assert_close(identity_inject(normed, ones, zeros), normed)
    mu = _t(np.random.default_rng(3).normal(size=(2, 8)))
    out = identity_inject(normed, zeros, mu)
    torch.testing.assert_close(out, mu[..., None, None].expand_as(normed))


def test_identity_inject_broadcast_oracle():
    rng = np.random.default_rng(4)
    normed, sig, mu = rng.normal(size=(2, 8, 3, 3)), rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    expected = np.empty_like(normed)
    for n, c, i, j in np.ndindex(*normed.shape):
        expected[n, c, i, j] = normed[n, c, i, j] * sig[n, c] + mu[n, c]
    np.testing.assert_allclose(identity_inject(_t(normed), _t(sig), _t(mu)).numpy(), expected, atol=1e-6)


def _mib(**kw):
    return InformationBottleneck(_stats(), MIBConfig(**kw), id_dim=16)


def test_filter_zero_weights_is_half():
    m = _mib()
    with torch.no_grad():
        m.filter.weight.zero_()
        m.filter.bias.zero_()
    lam = m.information_filter(torch.randn(2, 8, 4, 4))
    assert torch.all(lam == 0.5)


def test_filter_open_interval():
    m = _mib()
    with torch.no_grad():
        lam = m.information_filter(100 * torch.randn(2, 8, 4, 4))
    assert float(lam.min()) > 0 and float(lam.max()) < 1


def test_filter_saturation():
    m = _mib()
    with torch.no_grad():
        m.filter.weight.zero_()
        m.filter.bias.fill_(20.0)
    assert float(m.information_filter(torch.randn(1, 8, 4, 4)).detach().min()) > 0.999


def test_fuse_limits_and_midpoint():
    manifold, e = torch.full((1, 8, 2, 2), 2.0), torch.zeros(1, 8, 2, 2)
    assert torch.equal(fuse(manifold, e, torch.ones_like(manifold)), manifold)
    assert torch.equal(fuse(manifold, e, torch.zeros_like(manifold)), e)
    assert torch.all(fuse(manifold, e, torch.full_like(manifold, 0.5)) == 1.0)


def test_fuse_shape_mismatch():
    with pytest.raises(ShapeError):
        fuse(torch.zeros(1, 8, 2, 2), torch.zeros(1, 8, 2, 3), torch.zeros(1, 8, 2, 2))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_fuse_bounded(seed):
    rng = np.random.default_rng(seed)
    manifold, e, lam = _t(rng.normal(size=(8, 3, 3))), _t(rng.normal(size=(8, 3, 3))), _t(rng.uniform(size=(8, 3, 3)))
    fused = fuse(manifold, e, lam)
    assert torch.all(fused >= torch.minimum(manifold, e) - 1e-12)
    assert torch.all(fused <= torch.maximum(manifold, e) + 1e-12)


def test_info_loss_zero_gate():
    normed = _t(np.random.default_rng(5).normal(size=(1, 8, 4, 4)))
    assert float(info_loss(torch.zeros_like(normed), normed)) == 0.0


def test_info_loss_at_half():
    assert float(info_loss(_t([0.5]), _t([0.0]))) == pytest.approx(INFO_AT_HALF, abs=1e-10)


def test_info_loss_diverges_near_one():
    assert float(info_loss(_t([1 - 1e-6]), _t([0.3]))) > 20


@pytest.mark.parametrize("lam", [1.0, 1.5, -0.1])
def test_info_loss_domain(lam):
    with pytest.raises(DomainError):
        info_loss(_t([lam]), _t([0.0]))


def test_info_loss_nonnegative_grid():
    lam, F = np.meshgrid(np.arange(1, 100) / 100, np.linspace(-5, 5, 101), indexing="ij")
    assert float(info_loss(_t(lam), _t(F))) >= 0
    assert float(info_loss_elementwise(_t(lam), _t(F)).min()) >= 0


def test_info_loss_increasing_in_gate():
    lam = np.arange(1, 100) / 100
    vals = info_loss_elementwise(_t(lam), torch.zeros(len(lam), dtype=torch.float64)).numpy()
    assert np.all(np.diff(vals) > 0)


def test_info_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(6)
    lam = rng.uniform(0.01, 0.99, 100)
    F = rng.uniform(-5, 5, 100)
    h = 1e-6
    def f(l):
        return info_loss_elementwise(_t(l), _t(F)).numpy()

    fd = (f(lam + h) - f(lam - h)) / (2 * h)
    np.testing.assert_allclose(info_loss_grad(lam, F), fd, rtol=1e-4)
    # autograd agrees with the closed form as well
    lt = _t(lam).requires_grad_(True)
    info_loss(lt, _t(F)).backward()
    np.testing.assert_allclose(lt.grad.numpy() * lam.size, info_loss_grad(lam, F), rtol=1e-10)


def test_bottleneck_tradeoff_monotone():
    # one-element instance: manifold is close to the HQ value, compensation is far from it
    manifold, comp, z_hq, normed = 1.0, 0.0, 0.9, 1.5
    grid = _t(np.arange(1, 1000) / 1000)

    def argmin(beta):
        fused = fuse(torch.full_like(grid, manifold), torch.full_like(grid, comp), grid)
        obj = beta * info_loss_elementwise(grid, torch.full_like(grid, normed)) + (fused - z_hq) ** 2
        return float(grid[int(torch.argmin(obj))])

    stars = [argmin(b) for b in (0.001, 0.01, 0.1)]
    assert stars == [0.89, 0.832, 0.601]
    assert all(b <= a for a, b in zip(stars, stars[1:]))


def test_rec_loss_cases():
    z = torch.randn(2, 8, 3, 3)
    assert float(rec_loss(z, z)) == 0.0
    assert float(rec_loss(z + 0.5, z)) == pytest.approx(0.25, rel=1e-6)
    with pytest.raises(ShapeError):
        rec_loss(z, z[..., :2])


def test_rec_loss_uses_latent_means():
    a, b = torch.zeros(1, 8, 2, 2), torch.zeros(1, 8, 2, 2)
    b[:, 4:] = 7.0  # log-variance channels are ignored
    assert float(rec_loss(a, b)) == 0.0


def test_rec_loss_oracle():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=(2, 4, 3, 3))
    brute = sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert float(rec_loss(_t(a), _t(b))) == pytest.approx(brute, abs=1e-6)


def test_module_modes():
    manifold = torch.randn(2, 8, 4, 4)
    emb = torch.nn.functional.normalize(torch.randn(2, 16), dim=1)
    off = _mib(compensation="off")(manifold, emb)
    assert torch.equal(off.fused, manifold) and float(off.info) == 0.0

    none = _mib(compensation="none")(manifold, emb)
    torch.testing.assert_close(none.fused, none.lam * manifold)

    m = _mib(compensation="id")
    st_ = m(manifold, emb)
    assert st_.fused.shape == manifold.shape and torch.isfinite(st_.fused).all()
    assert float(st_.lam.min()) > 0 and float(st_.lam.max()) < 1
    torch.testing.assert_close(st_.info, info_loss(st_.lam, st_.normed))

    g = torch.Generator().manual_seed(0)
    noisy = _mib(compensation="noise")(manifold, None, generator=g)
    assert not torch.equal(noisy.comp, torch.zeros_like(manifold))


def test_identity_changes_fused_manifold():
    m = _mib()
    manifold = torch.randn(1, 8, 4, 4)
    a = m(manifold, torch.nn.functional.normalize(torch.randn(1, 16), dim=1)).fused
    b = m(manifold, torch.nn.functional.normalize(torch.randn(1, 16), dim=1)).fused
    assert not torch.allclose(a, b)


def test_rec_gradient_reaches_filter_and_identity_maps():
    m = _mib()
    manifold = torch.randn(2, 8, 4, 4)
    emb = torch.nn.functional.normalize(torch.randn(2, 16), dim=1)
    st_ = m(manifold, emb)
    rec_loss(st_.fused, torch.randn(2, 8, 4, 4)).backward()
    for p in (m.filter.weight, m.fc_sigma.weight, m.fc_mu.weight):
        assert p.grad is not None and float(p.grad.abs().sum()) > 0
