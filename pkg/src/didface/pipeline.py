"""End-to-end desk-scale run: codec, statistics, both stages, restoration.

Everything a run produces is written under one directory, so two runs with the
same :class:`DeskConfig` can be compared file by file.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .codec import CodecConfig, compute_qc_stats, reconstruct, save_codec, train_codec
from .data import synthetic_faces, write_image_dir
from .degradation import build_manifest, degrade, write_manifest
from .metrics import psnr
from .trainer import TrainConfig, restore, synthesize_stage1, train_stage1, train_stage2, write_training_log

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    n_images: int = 16
    resolution: int = 64
    data_seed: int = 0
    codec_steps: int = 2000
    stage1_iterations: int = 2000
    stage2_iterations: int = 1000
    # batch 16 / lr 1e-3 instead of the library defaults 2 / 1e-4: the run must converge in a few thousand steps
    batch_size: int = 16
    learning_rate: float = 1e-3
    sampler_steps: int = 50
    train_lq_seed: int = 5
    eval_lq_seed: int = 99
    seed: int = 0
    compensation: str = "id"
    lambda_info: float = 0.001

    def codec_config(self) -> CodecConfig:
        return CodecConfig(resolution=self.resolution, steps=self.codec_steps, seed=self.seed)

    def train_config(self, stage: int) -> TrainConfig:
        return TrainConfig(
            stage=stage,
            iterations=self.stage1_iterations if stage == 1 else self.stage2_iterations,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            resolution=self.resolution,
            sampler_steps=self.sampler_steps,
            compensation=self.compensation,
            lambda_info=self.lambda_info,
        )


@dataclass
class DeskResult:
    out_dir: Path
    hq: np.ndarray
    lq: np.ndarray
    stage1_out: np.ndarray
    stage2_out: np.ndarray
    codec_recon_psnr: float
    codec_losses: list[float]
    stage1_log: list[dict]
    stage2_log: list[dict]
    seconds: dict[str, float] = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def mean_psnr(self, images: np.ndarray) -> float:
        return float(np.mean([psnr(a, b) for a, b in zip(images, self.hq)]))

    def summary(self) -> dict:
        return {
            "psnr_lq": self.mean_psnr(self.lq),
            "psnr_d1": self.mean_psnr(self.stage1_out),
            "psnr_d2": self.mean_psnr(self.stage2_out),
            "codec_recon_psnr": self.codec_recon_psnr,
        }


def _degraded(hq: np.ndarray, seed: int, manifest_path: Path) -> np.ndarray:
    records = build_manifest([f"{i:05d}.png" for i in range(len(hq))], seed)
    write_manifest(manifest_path, records)
    return np.stack([degrade(img, rec.params) for img, rec in zip(hq, records)])


def run_pipeline(out_dir: str | Path, cfg: DeskConfig | None = None) -> DeskResult:
    cfg = cfg or DeskConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    timer: dict[str, float] = {}

    def tick(name, t0):
        timer[name] = round(time.perf_counter() - t0, 1)
        log.info("%s done in %.1fs", name, timer[name])

    hq = synthetic_faces(cfg.n_images, size=cfg.resolution, seed=cfg.data_seed)
    np.save(out / "hq.npy", hq)

    t0 = time.perf_counter()
    codec, codec_losses = train_codec(hq, cfg.codec_config())
    save_codec(codec, out / "codec.pt")
    recon = float(np.mean([psnr(a, b) for a, b in zip(reconstruct(codec, hq), hq)]))
    stats = compute_qc_stats(hq, codec)
    stats.save(out / "stats.json")
    tick("codec", t0)

    t0 = time.perf_counter()
    s1 = train_stage1(hq, codec, stats, cfg.train_config(1))
    s1.save(out / "stage1.pt")
    write_training_log(out / "stage1.jsonl", s1.log)
    tick("stage1", t0)

    # Stage II reads a fixed cache of stage-1 outputs on one degraded copy of the training set
    t0 = time.perf_counter()
    lq_train = _degraded(hq, cfg.train_lq_seed, out / "train_manifest.jsonl")
    stage1_cache = synthesize_stage1(s1, codec, lq_train, cfg.sampler_steps, cfg.seed + 1)
    np.save(out / "stage1_cache.npy", stage1_cache)
    s2 = train_stage2(hq, stage1_cache, s1, codec, stats, cfg.train_config(2))
    s2.save(out / "stage2.pt")
    write_training_log(out / "stage2.jsonl", s2.log)
    tick("stage2", t0)

    t0 = time.perf_counter()
    lq = _degraded(hq, cfg.eval_lq_seed, out / "eval_manifest.jsonl")
    stage2_out, stage1_out = restore(lq, s1, s2, codec, cfg.sampler_steps, cfg.seed, return_stage1=True)
    for name, arr in (("lq", lq), ("stage1_out", stage1_out), ("stage2_out", stage2_out)):
        np.save(out / f"{name}.npy", arr)
        write_image_dir(out / name, arr)
    tick("restore", t0)

    result = DeskResult(
        out, hq, lq, stage1_out, stage2_out, recon, codec_losses, s1.log, s2.log, timer,
        artifacts={"codec": codec, "stats": stats, "stage1": s1, "stage2": s2},
    )
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return result
