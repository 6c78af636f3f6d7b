"""Epsilon-prediction UNet and the AdaIN control branch that modulates it.

The control branch turns an 8-channel manifold into a feature pyramid, one
level per UNet encoder block, and maps each level through a pair of
zero-initialized 3x3 convolutions to spatial scale/shift maps. The UNet
instance-normalizes each encoder block output, applies the scale/shift, and
adds the block output back as a residual. With zero convolutions the residual
is all that survives, so a fresh control branch leaves the UNet untouched.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import LATENT_CHANNELS, MOMENT_CHANNELS
from .errors import ShapeError

SIGMA_FLOOR = 1e-5


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def instance_normalize(h: torch.Tensor, floor: float = SIGMA_FLOOR):
    """Per-sample, per-channel spatial standardization; returns ``(h_I, mu, sigma)``."""
    mu = h.mean(dim=(-2, -1), keepdim=True)
    sigma = h.var(dim=(-2, -1), keepdim=True, unbiased=False).sqrt().clamp_min(floor)
    return (h - mu) / sigma, mu, sigma


def adain_modulate(h: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    """``gamma * IN(h) + beta + h``."""
    if gamma.shape[-3:] != h.shape[-3:] or beta.shape[-3:] != h.shape[-3:]:
        raise ShapeError(f"gamma/beta {tuple(gamma.shape)}/{tuple(beta.shape)} do not match h {tuple(h.shape)}")
    h_i, _, _ = instance_normalize(h)
    return gamma * h_i + beta + h


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(8, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class UNet(nn.Module):
    """Three-level epsilon predictor over ``4 x h x w`` latents."""

    def __init__(self, widths=(32, 64, 128), in_channels: int = LATENT_CHANNELS):
        super().__init__()
        self.widths = tuple(widths)
        temb_dim = 4 * widths[0]
        self.temb_dim = temb_dim
        self.time_mlp = nn.Sequential(nn.Linear(widths[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        cin = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock(cin, w, temb_dim))
            cin = w
            last = i == len(widths) - 1
            self.downsamplers.append(nn.Identity() if last else nn.Conv2d(w, w, 3, stride=2, padding=1))
        self.mid = ResBlock(cin, cin, temb_dim)

        self.up_blocks = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up_blocks.append(ResBlock(cin + w, w, temb_dim))
            cin = w
        self.norm_out = nn.GroupNorm(8, cin)
        self.conv_out = nn.Conv2d(cin, in_channels, 3, padding=1)

    @property
    def n_modulated(self) -> int:
        """Encoder blocks plus the middle block."""
        return len(self.widths) + 1

    def level_shapes(self, latent_size: int) -> list[tuple[int, int, int]]:
        shapes = [(w, latent_size >> i, latent_size >> i) for i, w in enumerate(self.widths)]
        return shapes + [shapes[-1]]

    def forward(self, z_t, t, control: list[tuple[torch.Tensor, torch.Tensor]] | None = None):
        if control is not None and len(control) != self.n_modulated:
            raise ShapeError(f"need {self.n_modulated} control levels, got {len(control)}")
        temb = self.time_mlp(timestep_embedding(t, self.widths[0]))
        h = self.conv_in(z_t)
        skips = []
        for i, (block, down) in enumerate(zip(self.down_blocks, self.downsamplers)):
            h = block(h, temb)
            if control is not None:
                h = adain_modulate(h, *control[i])
            skips.append(h)
            h = down(h)
        h = self.mid(h, temb)
        if control is not None:
            h = adain_modulate(h, *control[-1])
        for i, block in enumerate(self.up_blocks):
            skip = skips.pop()
            if h.shape[-1] != skip.shape[-1]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = block(torch.cat([h, skip], dim=1), temb)
        return self.conv_out(F.silu(self.norm_out(h)))


def zero_conv(c: int) -> nn.Conv2d:
    conv = nn.Conv2d(c, c, 3, padding=1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Manifold -> feature pyramid -> per-level AdaIN scale/shift maps.

    Inputs are first standardized with fixed per-channel moment statistics
    (buffers, not trained) so raw log-variance channels do not swamp the
    first convolution.
    """

    def __init__(self, widths=(32, 64, 128), in_channels: int = MOMENT_CHANNELS, seed: int = 0):
        super().__init__()
        self.widths = tuple(widths)
        self.register_buffer("in_mu", torch.zeros(in_channels))
        self.register_buffer("in_sigma", torch.ones(in_channels))
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.extractor = nn.ModuleList()
            cin = in_channels
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                self.extractor.append(
                    nn.Sequential(nn.Conv2d(cin, w, 3, stride=stride, padding=1), nn.SiLU(), nn.Conv2d(w, w, 3, padding=1), nn.SiLU())
                )
                cin = w
            levels = list(widths) + [widths[-1]]
            self.gamma_convs = nn.ModuleList(zero_conv(c) for c in levels)
            self.beta_convs = nn.ModuleList(zero_conv(c) for c in levels)
        finally:
            torch.random.set_rng_state(gen_state)

    def set_input_stats(self, mu, sigma) -> None:
        self.in_mu.copy_(torch.as_tensor(np.asarray(mu), dtype=torch.float32))
        self.in_sigma.copy_(torch.as_tensor(np.asarray(sigma), dtype=torch.float32))

    def extract_features(self, manifold: torch.Tensor) -> list[torch.Tensor]:
        if manifold.ndim != 4 or manifold.shape[1] != self.in_mu.numel():
            raise ShapeError(f"expected N x {self.in_mu.numel()} x h x w manifold, got {tuple(manifold.shape)}")
        h = (manifold - self.in_mu.view(1, -1, 1, 1)) / self.in_sigma.view(1, -1, 1, 1)
        feats = []
        for stage in self.extractor:
            h = stage(h)
            feats.append(h)
        return feats

    def adain_params(self, feats: list[torch.Tensor]) -> list[tuple[torch.Tensor, torch.Tensor]]:
        levels = feats + [feats[-1]]
        return [(g(f), b(f)) for f, g, b in zip(levels, self.gamma_convs, self.beta_convs)]

    def forward(self, manifold: torch.Tensor) -> list[tuple[torch.Tensor, torch.Tensor]]:
        return self.adain_params(self.extract_features(manifold))

    def zero_conv_parameters(self):
        for conv in list(self.gamma_convs) + list(self.beta_convs):
            yield from conv.parameters()


class ControlledDenoiser(nn.Module):
    """UNet plus control branch; ``manifold=None`` runs the bare UNet."""

    def __init__(self, widths=(32, 64, 128), seed: int = 0):
        super().__init__()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        try:
            self.unet = UNet(widths)
        finally:
            torch.random.set_rng_state(gen_state)
        self.control = init_control_branch(self.unet, seed=seed + 1)

    def forward(self, z_t, t, manifold: torch.Tensor | None = None):
        params = None if manifold is None else self.control(manifold)
        return self.unet(z_t, t, params)


def init_control_branch(unet: UNet, seed: int = 0) -> ControlBranch:
    return ControlBranch(unet.widths, seed=seed)


def extract_control_features(branch: ControlBranch, manifold: torch.Tensor) -> list[torch.Tensor]:
    return branch.extract_features(manifold)
