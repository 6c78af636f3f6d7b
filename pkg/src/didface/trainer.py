"""Two-stage training and restoration.

Stage I learns to denoise HQ latents conditioned (through the AdaIN control
branch) on the manifold of an on-the-fly degraded copy. Its restorations are
cached, then Stage II warm-starts from Stage I and learns jointly with the
information bottleneck, conditioning on the fused manifold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .codec import Codec, QCStats, encode_images, images_to_tensor, tensor_to_images
from .control import ControlledDenoiser
from .degradation import degrade, sample_params
from .diffusion import NoiseSchedule, ddpm_sample, ldm_loss, make_schedule, q_sample
from .errors import ConfigurationError, ParameterError, ShapeError
from .identity import IdentityEmbedder
from .mib import InformationBottleneck, MIBConfig, rec_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: int = 1
    iterations: int = 2000
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    lambda_info: float = 0.001
    lambda_rec: float = 1.0
    resolution: int = 64
    sampler_steps: int = 50
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    widths: tuple[int, ...] = (32, 64, 128)
    compensation: str = "id"
    normalization: str = "dataset"
    warm_start: bool = True
    source: str = "stage1"
    log_every: int = 1

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.stage not in (1, 2):
            raise ParameterError(f"stage must be 1 or 2, got {self.stage}")
        if self.iterations < 0 or self.batch_size < 1 or self.sampler_steps < 1:
            raise ParameterError("iterations >= 0, batch_size >= 1, sampler_steps >= 1 required")
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.source not in ("stage1", "lq"):
            raise ParameterError(f"source must be 'stage1' or 'lq', got {self.source!r}")
        if self.sampler_steps > self.timesteps:
            raise ParameterError("sampler_steps cannot exceed timesteps")
        if not self.widths or any(w < 8 or w % 8 for w in self.widths):
            raise ParameterError("widths must be multiples of 8")
        if self.weight_decay < 0 or self.log_every < 1:
            raise ParameterError("weight_decay >= 0 and log_every >= 1 required")
        self.schedule()
        self.mib_config(0.01)

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)

    def mib_config(self, floor: float) -> MIBConfig:
        return MIBConfig(
            beta=self.lambda_info,
            lambda_rec=self.lambda_rec,
            floor=floor,
            compensation=self.compensation,
            normalization=self.normalization,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class StageCheckpoint:
    """In-memory form of a stage checkpoint."""

    config: TrainConfig
    denoiser: ControlledDenoiser
    mib: InformationBottleneck | None
    codec_hash: str
    iteration: int
    log: list[dict] = field(default_factory=list)

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {f"denoiser.{k}": v for k, v in self.denoiser.state_dict().items()}
        if self.mib is not None:
            out.update({f"mib.{k}": v for k, v in self.mib.state_dict().items()})
        return out

    def save(self, path: str | Path) -> None:
        meta = {
            "config": self.config.to_dict(),
            "codec_hash": self.codec_hash,
            "iteration": self.iteration,
            "stage": self.config.stage,
        }
        ckpt_io.save(path, kind=f"stage{self.config.stage}", tensors=self.tensors(), meta=meta)

    @classmethod
    def load(cls, path: str | Path, stats: QCStats | None = None, stage: int | None = None) -> "StageCheckpoint":
        payload = ckpt_io.load(path, kind=None if stage is None else f"stage{stage}")
        meta = payload["meta"]
        config = TrainConfig.from_dict(meta["config"])
        tensors = payload["tensors"]
        denoiser = ControlledDenoiser(config.widths)
        denoiser.load_state_dict({k[len("denoiser."):]: v for k, v in tensors.items() if k.startswith("denoiser.")})
        mib = None
        mib_state = {k[len("mib."):]: v for k, v in tensors.items() if k.startswith("mib.")}
        if mib_state:
            if stats is None:
                raise ConfigurationError("stage-2 checkpoint needs moment statistics to load")
            mib = InformationBottleneck(stats, config.mib_config(stats.floor))
            mib.load_state_dict(mib_state)
        denoiser.eval()
        return cls(config, denoiser, mib, meta["codec_hash"], int(meta["iteration"]))


def _check_artifacts(codec: Codec | None, stats: QCStats | None) -> None:
    if codec is None:
        raise ConfigurationError("a trained codec is required")
    if stats is None:
        raise ConfigurationError("moment statistics are required")
    if stats.codec_hash and stats.codec_hash != codec.fingerprint():
        raise ConfigurationError("moment statistics were computed with a different codec")


def _check_images(images: np.ndarray, resolution: int, what: str) -> None:
    if len(images) == 0:
        raise ConfigurationError(f"{what}: empty image set")
    if images.shape[1:3] != (resolution, resolution):
        raise ShapeError(f"{what}: expected {resolution}x{resolution} images, got {images.shape[1:3]}")


def _optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)


def _degrade_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([degrade(img, sample_params(int(rng.integers(0, 2**63 - 1)))) for img in images])


def _noisy_batch(z: torch.Tensor, sched: NoiseSchedule, gen: torch.Generator):
    t = torch.randint(1, sched.T + 1, (z.shape[0],), generator=gen)
    eps = torch.randn(z.shape, generator=gen)
    return q_sample(z, t, eps, sched), t, eps


def new_denoiser(config: TrainConfig, stats: QCStats) -> ControlledDenoiser:
    denoiser = ControlledDenoiser(config.widths, seed=config.seed)
    denoiser.control.set_input_stats(stats.mu, stats.divisor())
    return denoiser


def train_stage1(
    hq: np.ndarray,
    codec: Codec | None,
    stats: QCStats | None,
    config: TrainConfig | None = None,
) -> StageCheckpoint:
    """Fit the Stage-I denoiser and control branch on freshly degraded pairs."""
    config = config or TrainConfig(stage=1)
    _check_artifacts(codec, stats)
    _check_images(hq, config.resolution, "stage 1")
    torch.manual_seed(config.seed)
    sched = config.schedule()
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    denoiser = new_denoiser(config, stats)
    denoiser.train()
    opt = _optimizer(denoiser.parameters(), config)

    with torch.no_grad():
        z_hq = codec.to_diffusion(encode_images(codec, hq))
    history = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(hq), size=config.batch_size)
        with torch.no_grad():
            manifold = codec.encode(images_to_tensor(_degrade_batch(hq[idx], rng)))
        z_t, t, eps = _noisy_batch(z_hq[idx], sched, gen)
        loss = ldm_loss(denoiser(z_t, t, manifold), eps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if it % config.log_every == 0:
            history.append({"iteration": it, "ldm": loss.item(), "total": loss.item()})
        if it % 250 == 0:
            log.info("stage1 it %d ldm %.5f", it, loss.item())
    denoiser.eval()
    return StageCheckpoint(config, denoiser, None, codec.fingerprint(), config.iterations, history)


def _sample_conditioned(
    denoiser: ControlledDenoiser,
    manifold: torch.Tensor,
    sched: NoiseSchedule,
    steps: int,
    seeds: Sequence[int],
) -> torch.Tensor:
    shape = (manifold.shape[0], 4, manifold.shape[-2], manifold.shape[-1])
    with torch.no_grad():
        params = denoiser.control(manifold)
        return ddpm_sample(lambda z, t: denoiser.unet(z, t, params), shape, sched, steps, seed=list(seeds))


def _image_seeds(seed: int, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n, np.uint32)]


@torch.no_grad()
def synthesize_stage1(
    ckpt: StageCheckpoint,
    codec: Codec,
    lq: np.ndarray,
    steps: int = 50,
    seed: int = 0,
) -> np.ndarray:
    """Stage-I restorations of ``lq``; image ``i`` always uses the ``i``-th derived seed."""
    _check_images(lq, ckpt.config.resolution, "stage 1 synthesis")
    if ckpt.codec_hash != codec.fingerprint():
        raise ConfigurationError("stage-1 checkpoint was trained with a different codec")
    manifold = encode_images(codec, lq)
    z = _sample_conditioned(ckpt.denoiser, manifold, ckpt.config.schedule(), steps, _image_seeds(seed, len(lq)))
    return tensor_to_images(codec.decode(codec.from_diffusion(z)))


@dataclass
class Stage2Log:
    iteration: int
    ldm: float
    info: float
    rec: float
    total: float

    def recombined(self, lambda_info: float, lambda_rec: float) -> float:
        return self.ldm + lambda_info * self.info + lambda_rec * self.rec


def train_stage2(
    hq: np.ndarray,
    stage1_out: np.ndarray | None,
    stage1: StageCheckpoint | None,
    codec: Codec | None,
    stats: QCStats | None,
    config: TrainConfig | None = None,
    embedder: IdentityEmbedder | None = None,
) -> StageCheckpoint:
    """Joint finetune of the denoiser with the information bottleneck.

    ``config.source == "lq"`` skips Stage I: the bottleneck then reads freshly
    degraded HQ images each step instead of the cached ``stage1_out``.
    """
    config = config or TrainConfig(stage=2, iterations=1000)
    _check_artifacts(codec, stats)
    _check_images(hq, config.resolution, "stage 2")
    from_lq = config.source == "lq"
    if not from_lq:
        if stage1_out is None or len(stage1_out) != len(hq):
            raise ConfigurationError("stage 2 needs one stage-1 output per HQ image")
        _check_images(stage1_out, config.resolution, "stage-1 outputs")
    torch.manual_seed(config.seed)
    sched = config.schedule()
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    embedder = embedder or IdentityEmbedder(config.resolution)

    denoiser = new_denoiser(config, stats)
    if config.warm_start and stage1 is not None:
        denoiser.load_state_dict(stage1.denoiser.state_dict())
    mib = InformationBottleneck(stats, config.mib_config(stats.floor), id_dim=embedder.dim, seed=config.seed + 7)
    denoiser.train()
    mib.train()
    opt = _optimizer(list(denoiser.parameters()) + list(mib.parameters()), config)

    with torch.no_grad():
        m_hq = encode_images(codec, hq)
        z_hq = codec.to_diffusion(m_hq)
        if not from_lq:
            manifold_all = encode_images(codec, stage1_out)
            id_all = torch.from_numpy(embedder.embed(stage1_out))

    history = []
    for it in range(config.iterations):
        idx = rng.integers(0, len(hq), size=config.batch_size)
        if from_lq:
            lq = _degrade_batch(hq[idx], rng)
            with torch.no_grad():
                manifold = codec.encode(images_to_tensor(lq))
                id_emb = torch.from_numpy(embedder.embed(lq))
        else:
            manifold, id_emb = manifold_all[idx], id_all[idx]
        state = mib(manifold, id_emb, generator=gen)
        rec = rec_loss(state.fused, m_hq[idx])
        z_t, t, eps = _noisy_batch(z_hq[idx], sched, gen)
        ldm = ldm_loss(denoiser(z_t, t, state.fused), eps)
        total = ldm + config.lambda_info * state.info + config.lambda_rec * rec
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if it % config.log_every == 0:
            history.append(asdict(Stage2Log(it, ldm.item(), state.info.item(), rec.item(), total.item())))
        if it % 250 == 0:
            log.info("stage2 it %d ldm %.5f info %.5f rec %.5f", it, ldm.item(), state.info.item(), rec.item())
    denoiser.eval()
    mib.eval()
    return StageCheckpoint(config, denoiser, mib, codec.fingerprint(), config.iterations, history)


@torch.no_grad()
def restore(
    lq: np.ndarray,
    stage1: StageCheckpoint | None,
    stage2: StageCheckpoint,
    codec: Codec,
    steps: int = 50,
    seed: int = 0,
    id_override: np.ndarray | None = None,
    embedder: IdentityEmbedder | None = None,
    return_stage1: bool = False,
):
    """Full two-stage restoration of a batch ``(N, H, W, 3)`` (or one image).

    ``id_override`` replaces the identity embedding of the Stage-I output with
    a given unit vector (or one vector per image).
    """
    single = np.ndim(lq) == 3
    lq = np.asarray(lq, dtype=np.float32)[None] if single else np.asarray(lq, dtype=np.float32)
    res = stage2.config.resolution
    _check_images(lq, res, "restore")
    if stage2.mib is None:
        raise ConfigurationError("stage-2 checkpoint has no bottleneck weights")
    from_lq = stage2.config.source == "lq"
    if stage1 is None and not from_lq:
        raise ConfigurationError("restoration needs the stage-1 checkpoint")
    for ck in (stage1, stage2):
        if ck is not None and ck.codec_hash != codec.fingerprint():
            raise ConfigurationError("checkpoint was trained with a different codec")
    embedder = embedder or IdentityEmbedder(res)
    seeds1 = _image_seeds(seed, len(lq))
    seeds2 = _image_seeds(seed + 1, len(lq))
    if from_lq:
        stage1_out = lq
    else:
        stage1_out = synthesize_stage1(stage1, codec, lq, steps, seed)
    manifold = encode_images(codec, stage1_out)
    if id_override is not None:
        emb = np.broadcast_to(np.asarray(id_override, dtype=np.float32), (len(lq), embedder.dim))
        id_emb = torch.from_numpy(np.array(emb))
    else:
        id_emb = torch.from_numpy(embedder.embed(stage1_out))
    state = stage2.mib(manifold, id_emb, generator=torch.Generator().manual_seed(seeds2[0]))
    z = _sample_conditioned(stage2.denoiser, state.fused, stage2.config.schedule(), steps, seeds2)
    stage2_out = tensor_to_images(codec.decode(codec.from_diffusion(z)))
    if single:
        stage2_out, stage1_out = stage2_out[0], stage1_out[0]
    return (stage2_out, stage1_out) if return_stage1 else stage2_out


def write_training_log(path: str | Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_training_log(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
