"""Small variational image codec: encoder, quant-conv moments head, decoder.

The codec downsamples by 8 into a 4-channel latent. The 1x1 quant conv lifts
the encoder output to 8 moment channels (4 means, 4 log-variances), which is
the manifold the diffusion stages and the information bottleneck operate on.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt_io
from .degradation import degrade, sample_params
from .errors import ConfigurationError, ParameterError, ShapeError

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
MOMENT_CHANNELS = 2 * LATENT_CHANNELS
LOGVAR_CLAMP = (-30.0, 20.0)
DOWNSAMPLE = 8


class DiagonalGaussian:
    """Independent Gaussian per latent element, parameterized by 8-channel moments."""

    def __init__(self, moments: torch.Tensor):
        if moments.shape[-3] != MOMENT_CHANNELS:
            raise ShapeError(f"moments need {MOMENT_CHANNELS} channels, got {moments.shape[-3]}")
        self.mean, logvar = torch.chunk(moments, 2, dim=-3)
        self.logvar = logvar.clamp(*LOGVAR_CLAMP)
        self.std = torch.exp(0.5 * self.logvar)
        self.var = torch.exp(self.logvar)

    def sample(self, seed: int | None = None, generator: torch.Generator | None = None) -> torch.Tensor:
        if generator is None and seed is not None:
            generator = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return self.mean + self.std * noise

    def mode(self) -> torch.Tensor:
        return self.mean

    def kl_to_standard(self) -> torch.Tensor:
        """KL(q || N(0, I)) summed over latent elements, one value per batch item."""
        kl = 0.5 * (self.mean.pow(2) + self.var - 1.0 - self.logvar)
        return kl.flatten(start_dim=-3).sum(-1)


def to_distribution(moments: torch.Tensor) -> DiagonalGaussian:
    return DiagonalGaussian(moments)


def _block(cin, cout, stride=1):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1), nn.GroupNorm(8, cout), nn.SiLU())


@dataclass
class CodecConfig:
    resolution: int = 64
    widths: tuple[int, ...] = (32, 64, 64)
    steps: int = 2000
    batch_size: int = 8
    learning_rate: float = 1e-3
    kl_weight: float = 1e-6
    degrade_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if len(self.widths) != 3 or any(w < 8 or w % 8 for w in self.widths):
            raise ParameterError("codec widths must be three multiples of 8")
        if self.resolution < DOWNSAMPLE or self.resolution % DOWNSAMPLE:
            raise ParameterError(f"resolution must be a positive multiple of {DOWNSAMPLE}")
        if self.steps < 0 or self.batch_size < 1:
            raise ParameterError("steps >= 0 and batch_size >= 1 required")
        if self.learning_rate <= 0 or self.kl_weight < 0:
            raise ParameterError("learning_rate > 0 and kl_weight >= 0 required")
        if not 0.0 <= self.degrade_fraction <= 1.0:
            raise ParameterError("degrade_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CodecConfig":
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)


class Codec(nn.Module):
    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        self.config = config or CodecConfig()
        w = self.config.widths
        enc = [_block(3, w[0])]
        cin = w[0]
        for cout in w:
            enc += [_block(cin, cout, stride=2), _block(cout, cout)]
            cin = cout
        enc.append(nn.Conv2d(cin, LATENT_CHANNELS, 3, padding=1))
        self.encoder = nn.Sequential(*enc)
        self.quant_conv = nn.Conv2d(LATENT_CHANNELS, MOMENT_CHANNELS, 1)

        self.post_quant_conv = nn.Conv2d(LATENT_CHANNELS, LATENT_CHANNELS, 1)
        dec = [_block(LATENT_CHANNELS, w[-1])]
        cin = w[-1]
        for cout in reversed(w):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), _block(cin, cout), _block(cout, cout)]
            cin = cout
        dec.append(nn.Conv2d(cin, 3, 3, padding=1))
        self.decoder = nn.Sequential(*dec)
        # multiplies latent means into roughly unit scale for diffusion
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def latent_size(self) -> int:
        return self.config.resolution // DOWNSAMPLE

    def encode(self, img: torch.Tensor) -> torch.Tensor:
        """Images ``N x 3 x H x W`` in [-1, 1] -> moments ``N x 8 x H/8 x W/8``."""
        r = self.config.resolution
        if img.ndim != 4 or img.shape[1] != 3 or img.shape[-2:] != (r, r):
            raise ShapeError(f"expected N x 3 x {r} x {r} images, got {tuple(img.shape)}")
        m = self.quant_conv(self.encoder(img))
        mean, logvar = torch.chunk(m, 2, dim=1)
        return torch.cat([mean, logvar.clamp(*LOGVAR_CLAMP)], dim=1)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        s = self.latent_size
        if z.ndim != 4 or z.shape[1] != LATENT_CHANNELS or z.shape[-2:] != (s, s):
            raise ShapeError(f"expected N x {LATENT_CHANNELS} x {s} x {s} latents, got {tuple(z.shape)}")
        return self.decoder(self.post_quant_conv(z))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(z).clamp(-1.0, 1.0)

    # diffusion runs on scaled latent means
    def to_diffusion(self, moments: torch.Tensor) -> torch.Tensor:
        return moments[:, :LATENT_CHANNELS] * self.latent_scale

    def from_diffusion(self, z: torch.Tensor) -> torch.Tensor:
        return z / self.latent_scale

    def fingerprint(self) -> str:
        return ckpt_io.state_hash(self.state_dict())


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """``(N, H, W, 3)`` float array -> ``N x 3 x H x W`` float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float32)


def _recon_loss(codec: Codec, batch: torch.Tensor, kl_weight: float, gen: torch.Generator):
    dist = DiagonalGaussian(codec.encode(batch))
    recon = codec.decode_raw(dist.sample(generator=gen))
    rec = F.mse_loss(recon, batch)
    kl = dist.kl_to_standard().mean() / dist.mean[0].numel()
    return rec + kl_weight * kl, rec


def train_codec(images: np.ndarray, config: CodecConfig | None = None) -> tuple[Codec, list[float]]:
    """Fit the codec on ``images``; returns the model and per-step reconstruction losses.

    A ``degrade_fraction`` share of each batch is replaced by randomly degraded
    copies so that LQ inputs encode to meaningful manifolds too.
    """
    config = config or CodecConfig()
    if len(images) == 0:
        raise ConfigurationError("codec training needs a non-empty dataset")
    torch.manual_seed(config.seed)
    codec = Codec(config)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(codec.parameters(), lr=config.learning_rate)
    losses = []
    n = len(images)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch_size)
        batch = np.asarray(images[idx], dtype=np.float32).copy()
        for j in range(len(batch)):
            if rng.random() < config.degrade_fraction:
                batch[j] = degrade(batch[j], sample_params(int(rng.integers(0, 2**63 - 1))))
        loss, rec = _recon_loss(codec, images_to_tensor(batch), config.kl_weight, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(rec.item())
        if step % 500 == 0:
            log.info("codec step %d rec %.5f", step, losses[-1])
    codec.eval()
    if config.steps > 0:
        calibrate_latent_scale(codec, images)
    return codec, losses


@torch.no_grad()
def calibrate_latent_scale(codec: Codec, images: np.ndarray) -> float:
    m = codec.encode(images_to_tensor(images))[:, :LATENT_CHANNELS].double()
    std = float(m.std())
    codec.latent_scale.fill_(1.0 / max(std, 1e-6))
    return float(codec.latent_scale)


@torch.no_grad()
def encode_images(codec: Codec, images: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    out = [codec.encode(images_to_tensor(images[i : i + batch_size])) for i in range(0, len(images), batch_size)]
    return torch.cat(out)


@torch.no_grad()
def reconstruct(codec: Codec, images: np.ndarray) -> np.ndarray:
    m = encode_images(codec, images)
    return tensor_to_images(codec.decode(DiagonalGaussian(m).mode()))


def save_codec(codec: Codec, path: str | Path) -> None:
    ckpt_io.save(path, kind="codec", tensors=codec.state_dict(), meta={"config": codec.config.to_dict()})


def load_codec(path: str | Path) -> Codec:
    payload = ckpt_io.load(path, kind="codec")
    codec = Codec(CodecConfig.from_dict(payload["meta"]["config"]))
    codec.load_state_dict(payload["tensors"])
    codec.eval()
    return codec


# --- dataset statistics of the moments -------------------------------------

@dataclass
class QCStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int
    floor: float = 0.01
    codec_hash: str = ""

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.count < 1:
            raise ConfigurationError("stats need count >= 1")

    def divisor(self) -> np.ndarray:
        return np.maximum(self.sigma, self.floor)

    def to_dict(self) -> dict:
        return {
            "channels": {str(c): {"mean": float(m), "std": float(s)} for c, (m, s) in enumerate(zip(self.mu, self.sigma))},
            "count": self.count,
            "floor": self.floor,
            "codec_hash": self.codec_hash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QCStats":
        chans = sorted(d["channels"].items(), key=lambda kv: int(kv[0]))
        return cls(
            mu=[v["mean"] for _, v in chans],
            sigma=[v["std"] for _, v in chans],
            count=int(d["count"]),
            floor=float(d.get("floor", 0.01)),
            codec_hash=d.get("codec_hash", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "QCStats":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"stats file not found: {p}")
        return cls.from_dict(json.loads(p.read_text()))


def moment_stats(moments: torch.Tensor | np.ndarray, floor: float = 0.01) -> QCStats:
    """Per-channel mean/std over every image and spatial position (population std)."""
    m = np.asarray(moments, dtype=np.float64)
    if m.shape[0] == 0:
        raise ConfigurationError("stats need at least one encoded image")
    flat = m.transpose(1, 0, 2, 3).reshape(m.shape[1], -1)
    # shifting by one sample keeps constant channels exact (sigma == 0, mu == value)
    shift = flat[:, :1]
    d = flat - shift
    return QCStats(mu=shift[:, 0] + d.mean(1), sigma=d.std(1), count=m.shape[0], floor=floor)


def compute_qc_stats(images: np.ndarray, codec: Codec, floor: float = 0.01) -> QCStats:
    if len(images) == 0:
        raise ConfigurationError("stats need a non-empty dataset")
    stats = moment_stats(encode_images(codec, images).numpy(), floor)
    stats.codec_hash = codec.fingerprint()
    return stats
