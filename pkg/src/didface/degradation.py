"""Synthetic blind degradation: blur -> downsample -> noise -> JPEG -> upsample.

Images are ``H x W x 3`` float arrays in ``[-1, 1]``. Every randomized step is
driven by an explicit seed so an LQ set can be regenerated bit-exactly from its
manifest.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import cv2
import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .errors import ParameterError

BLUR_RANGE = (1.0, 15.0)
SCALE_RANGE = (0.8, 8.0)
NOISE_RANGE = (0.0, 20.0)
QUALITY_RANGE = (60, 100)


@dataclass(frozen=True)
class DegradationParams:
    blur_sigma: float
    down_scale: float
    noise_sigma: float
    jpeg_quality: int
    seed: int

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ParameterError(f"blur_sigma must be >= 0, got {self.blur_sigma}")
        if not SCALE_RANGE[0] <= self.down_scale <= SCALE_RANGE[1]:
            raise ParameterError(f"down_scale {self.down_scale} outside {SCALE_RANGE}")
        if not NOISE_RANGE[0] <= self.noise_sigma <= NOISE_RANGE[1]:
            raise ParameterError(f"noise_sigma {self.noise_sigma} outside {NOISE_RANGE}")
        if not QUALITY_RANGE[0] <= self.jpeg_quality <= QUALITY_RANGE[1]:
            raise ParameterError(f"jpeg_quality {self.jpeg_quality} outside {QUALITY_RANGE}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradationParams":
        return cls(
            blur_sigma=float(d["blur_sigma"]),
            down_scale=float(d["down_scale"]),
            noise_sigma=float(d["noise_sigma"]),
            jpeg_quality=int(d["jpeg_quality"]),
            seed=int(d["seed"]),
        )


def sample_params(rng_seed: int) -> DegradationParams:
    """Draw one random degradation setting, deterministically from ``rng_seed``."""
    rng = np.random.default_rng(rng_seed)
    blur = rng.uniform(*BLUR_RANGE)
    scale = rng.uniform(*SCALE_RANGE)
    noise = rng.uniform(*NOISE_RANGE)
    quality = int(rng.integers(QUALITY_RANGE[0], QUALITY_RANGE[1] + 1))
    seed = int(rng.integers(0, 2**63 - 1))
    return DegradationParams(float(blur), float(scale), float(noise), quality, seed)


def gaussian_kernel1d(sigma: float, max_radius: int | None = None) -> np.ndarray:
    """Normalized 1-D Gaussian taps with radius ``ceil(3 sigma)``."""
    radius = max(1, math.ceil(3.0 * sigma))
    if max_radius is not None:
        radius = max(0, min(radius, max_radius))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img
    h, w = img.shape[:2]
    out = np.asarray(img, dtype=np.float64)
    # kernel must fit inside the image for symmetric padding
    out = ndimage.correlate1d(out, gaussian_kernel1d(sigma, h - 1), axis=0, mode="reflect")
    out = ndimage.correlate1d(out, gaussian_kernel1d(sigma, w - 1), axis=1, mode="reflect")
    return out.astype(img.dtype, copy=False)


def _box_prefilter(img: np.ndarray, scale: float) -> np.ndarray:
    size = int(round(scale))
    if size <= 1:
        return img
    return ndimage.uniform_filter(img, size=(size, size, 1), mode="reflect")


def resample(
    img: np.ndarray,
    scale: float,
    direction: str = "down",
    size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Bilinear resize by ``scale``.

    ``direction="down"`` divides the size by ``scale`` after a box antialias
    prefilter; ``"up"`` multiplies it. ``size=(h, w)`` overrides the computed
    output size, which is how :func:`degrade` lands back on the input grid.
    """
    if scale < SCALE_RANGE[0]:
        raise ParameterError(f"scale must be >= {SCALE_RANGE[0]}, got {scale}")
    if direction not in ("down", "up"):
        raise ParameterError(f"direction must be 'down' or 'up', got {direction!r}")
    h, w = img.shape[:2]
    if size is None:
        f = 1.0 / scale if direction == "down" else scale
        size = (int(round(h * f)), int(round(w * f)))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ParameterError(f"resampled size {oh}x{ow} is empty")
    src = np.asarray(img, dtype=np.float32)
    if direction == "down":
        src = _box_prefilter(src, scale)
    if (oh, ow) == (h, w):
        return src.astype(img.dtype, copy=False)
    out = cv2.resize(src, (ow, oh), interpolation=cv2.INTER_LINEAR)
    return out.astype(img.dtype, copy=False)


def add_gaussian_noise(img: np.ndarray, sigma_n: float, seed: int) -> np.ndarray:
    """Add i.i.d. Gaussian noise of ``sigma_n`` 8-bit levels, then clip."""
    if sigma_n == 0:
        return img
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(img.shape) * (sigma_n / 127.5)
    return np.clip(img + noise, -1.0, 1.0).astype(img.dtype, copy=False)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= int(quality) <= 100:
        raise ParameterError(f"JPEG quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    # 4:4:4 sampling: chroma subsampling alone caps q=100 near 35 dB at 64x64
    PILImage.fromarray(to_uint8(img), mode="RGB").save(
        buf, format="JPEG", quality=int(quality), subsampling=0
    )
    buf.seek(0)
    out = np.asarray(PILImage.open(buf).convert("RGB"))
    return from_uint8(out).astype(img.dtype, copy=False)


def degrade(img: np.ndarray, params: DegradationParams) -> np.ndarray:
    """Apply the full LQ synthesis chain; output has the input's shape."""
    h, w = img.shape[:2]
    x = np.asarray(img, dtype=np.float32)
    x = gaussian_blur(x, params.blur_sigma)
    x = resample(x, params.down_scale, "down")
    x = add_gaussian_noise(x, params.noise_sigma, params.seed)
    x = jpeg_compress(x, params.jpeg_quality)
    x = resample(x, params.down_scale, "up", size=(h, w))
    return np.clip(x, -1.0, 1.0).astype(np.float32)


# --- image I/O and manifests -------------------------------------------------

def read_png(path: str | Path) -> np.ndarray:
    return from_uint8(np.asarray(PILImage.open(path).convert("RGB")))


def write_png(path: str | Path, img: np.ndarray) -> None:
    # explicit compress level keeps the byte stream stable across runs
    PILImage.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", compress_level=6)


@dataclass(frozen=True)
class ManifestRecord:
    source: str
    params: DegradationParams
    output: str | None = None

    def to_json(self) -> str:
        rec = {"source": self.source, **self.params.to_dict()}
        if self.output is not None:
            rec["output"] = self.output
        return json.dumps(rec, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "ManifestRecord":
        d = json.loads(line)
        return cls(source=d["source"], params=DegradationParams.from_dict(d), output=d.get("output"))


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def read_manifest(path: str | Path) -> Iterator[ManifestRecord]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield ManifestRecord.from_json(line)


def build_manifest(sources: Iterable[str], seed: int) -> list[ManifestRecord]:
    """One freshly sampled parameter set per source, derived from ``seed``."""
    seq = np.random.SeedSequence(seed)
    sources = list(sources)
    children = seq.spawn(len(sources))
    return [
        ManifestRecord(source=str(src), params=sample_params(int(child.generate_state(1, np.uint64)[0])))
        for src, child in zip(sources, children)
    ]
