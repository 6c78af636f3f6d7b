"""Manifold information bottleneck between the two diffusion stages.

Given the 8-channel moments ``manifold`` of a Stage-I restoration, the bottleneck

* standardizes them with dataset moment statistics: ``normed = (manifold - mu) / max(sigma, floor)``
* re-modulates ``normed`` per channel with scale/shift predicted from an identity
  embedding: ``comp = normed * sigma_id + mu_id``
* predicts a gate ``lam = sigmoid(conv(normed))`` and fuses
  ``fused = lam * manifold + (1 - lam) * comp``.

The gate is penalized by a closed-form Gaussian compression term and the fused
manifold is pulled towards the HQ manifold by a squared-error term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import LATENT_CHANNELS, MOMENT_CHANNELS, QCStats
from .errors import DomainError, ParameterError, ShapeError

# gate clamp keeps the log term finite when the sigmoid saturates in float32
GATE_EPS = 1e-6

COMPENSATION_MODES = ("id", "noise", "none", "off")
NORMALIZATIONS = ("dataset", "instance")


@dataclass
class MIBConfig:
    beta: float = 0.001
    lambda_rec: float = 1.0
    floor: float = 0.01
    compensation: str = "id"
    normalization: str = "dataset"

    def __post_init__(self):
        if self.beta < 0 or self.lambda_rec < 0 or self.floor <= 0:
            raise ParameterError("beta, lambda_rec must be >= 0 and floor > 0")
        if self.compensation not in COMPENSATION_MODES:
            raise ParameterError(f"compensation must be one of {COMPENSATION_MODES}")
        if self.normalization not in NORMALIZATIONS:
            raise ParameterError(f"normalization must be one of {NORMALIZATIONS}")


def _channel(v, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(np.asarray(v), dtype=like.dtype).view(1, -1, 1, 1)


def normalize_manifold(manifold: torch.Tensor, stats: QCStats) -> torch.Tensor:
    return (manifold - _channel(stats.mu, manifold)) / _channel(stats.divisor(), manifold)


def instance_normalize_manifold(manifold: torch.Tensor, floor: float = 0.01) -> torch.Tensor:
    """Standardize each channel by its own spatial moments."""
    mu = manifold.mean(dim=(-2, -1), keepdim=True)
    sd = manifold.var(dim=(-2, -1), keepdim=True, unbiased=False).sqrt().clamp_min(floor)
    return (manifold - mu) / sd


def identity_inject(normed: torch.Tensor, sigma_id: torch.Tensor, mu_id: torch.Tensor) -> torch.Tensor:
    """``normed * sigma_id + mu_id`` with per-channel vectors broadcast over space."""
    return normed * sigma_id[..., None, None] + mu_id[..., None, None]


def fuse(manifold: torch.Tensor, comp: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    if not manifold.shape == comp.shape == lam.shape:
        raise ShapeError(f"fuse needs equal shapes, got {tuple(manifold.shape)}, {tuple(comp.shape)}, {tuple(lam.shape)}")
    return lam * manifold + (1.0 - lam) * comp


def info_loss_elementwise(lam: torch.Tensor, normed: torch.Tensor) -> torch.Tensor:
    one_minus = 1.0 - lam
    return -2.0 * torch.log1p(-lam) + 0.5 * (one_minus.pow(2) + (lam * normed).pow(2) - 1.0)


def info_loss(lam: torch.Tensor, normed: torch.Tensor) -> torch.Tensor:
    """Mean of ``-log (1 - lam)^2 + 1/2 [(1 - lam)^2 + (lam normed)^2 - 1]``.

    ``lam = 0`` is admitted as the closed-form limit (full compression, zero
    loss); ``lam >= 1`` or negative gates raise :class:`DomainError`.
    """
    if torch.any(lam >= 1) or torch.any(lam < 0):
        raise DomainError("information gate must lie in [0, 1)")
    return info_loss_elementwise(lam, normed).mean()


def info_loss_grad(lam, normed):
    """Elementwise derivative of the compression term with respect to ``lam``."""
    lam = np.asarray(lam, dtype=np.float64)
    normed = np.asarray(normed, dtype=np.float64)
    return 2.0 / (1.0 - lam) - (1.0 - lam) + lam * normed**2


def rec_loss(fused: torch.Tensor, z_hq: torch.Tensor) -> torch.Tensor:
    """Squared error between the latent means (first 4 channels) of two manifolds."""
    if fused.shape != z_hq.shape:
        raise ShapeError(f"fused {tuple(fused.shape)} and z_hq {tuple(z_hq.shape)} differ")
    if fused.shape[-3] == MOMENT_CHANNELS:
        fused, z_hq = fused[..., :LATENT_CHANNELS, :, :], z_hq[..., :LATENT_CHANNELS, :, :]
    return F.mse_loss(fused, z_hq)


@dataclass
class MIBState:
    manifold: torch.Tensor
    normed: torch.Tensor
    lam: torch.Tensor
    comp: torch.Tensor
    fused: torch.Tensor
    info: torch.Tensor


class InformationBottleneck(nn.Module):
    def __init__(self, stats: QCStats, config: MIBConfig | None = None, id_dim: int = 128, seed: int = 0):
        super().__init__()
        self.config = config or MIBConfig(floor=stats.floor)
        self.register_buffer("mu", torch.as_tensor(stats.mu, dtype=torch.float32))
        self.register_buffer("divisor", torch.as_tensor(stats.divisor(), dtype=torch.float32))
        self.register_buffer("sigma", torch.as_tensor(stats.sigma, dtype=torch.float32))
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.filter = nn.Conv2d(MOMENT_CHANNELS, MOMENT_CHANNELS, 3, padding=1)
            self.fc_sigma = nn.Linear(id_dim, MOMENT_CHANNELS)
            self.fc_mu = nn.Linear(id_dim, MOMENT_CHANNELS)
        finally:
            torch.random.set_rng_state(gen_state)
        # start from the identity modulation: sigma_id ~ 1, mu_id ~ 0
        nn.init.ones_(self.fc_sigma.bias)
        nn.init.zeros_(self.fc_mu.bias)
        nn.init.zeros_(self.filter.bias)

    def normalize(self, manifold: torch.Tensor) -> torch.Tensor:
        if self.config.normalization == "instance":
            return instance_normalize_manifold(manifold, self.config.floor)
        return (manifold - self.mu.view(1, -1, 1, 1)) / self.divisor.view(1, -1, 1, 1)

    def information_filter(self, normed: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.filter(normed)).clamp(GATE_EPS, 1.0 - GATE_EPS)

    def identity_modulation(self, id_emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.fc_sigma(id_emb), self.fc_mu(id_emb)

    def forward(self, manifold: torch.Tensor, id_emb: torch.Tensor | None = None, generator: torch.Generator | None = None) -> MIBState:
        mode = self.config.compensation
        normed = self.normalize(manifold)
        if mode == "off":
            zero = manifold.new_zeros(())
            return MIBState(manifold, normed, torch.ones_like(manifold), torch.zeros_like(manifold), manifold, zero)
        lam = self.information_filter(normed)
        if mode == "id":
            if id_emb is None:
                raise ParameterError("identity compensation needs an embedding")
            sigma_id, mu_id = self.identity_modulation(id_emb)
            comp = identity_inject(normed, sigma_id, mu_id)
        elif mode == "noise":
            noise = torch.randn(manifold.shape, generator=generator, dtype=manifold.dtype)
            comp = self.mu.view(1, -1, 1, 1) + self.sigma.view(1, -1, 1, 1) * noise
        else:
            comp = torch.zeros_like(manifold)
        fused = fuse(manifold, comp, lam)
        return MIBState(manifold, normed, lam, comp, fused, info_loss(lam, normed))
