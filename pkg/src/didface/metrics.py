"""Full-reference quality metrics (PSNR, SSIM) and identity similarity."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .identity import IdentityEmbedder, cosine_similarity

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])


def _unit(img) -> np.ndarray:
    """[-1, 1] -> [0, 1] in float64."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    _check(a, b)
    mse = np.mean((_unit(a) - _unit(b)) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def luminance(img) -> np.ndarray:
    u = _unit(img)
    return u @ LUMA if u.ndim == 3 else u


def ssim(a: np.ndarray, b: np.ndarray, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM of the luminance channels over all fully-covered windows.

    Uses the reference constants ``K1 = 0.01, K2 = 0.03`` with dynamic range 1.
    """
    _check(a, b)
    x, y = luminance(a), luminance(b)
    w = gaussian_window(win_size, sigma)

    def filt(im):
        full = ndimage.correlate(im, w, mode="constant")
        r = win_size // 2
        return full[r : im.shape[0] - r, r : im.shape[1] - r]

    c1, c2 = 0.01**2, 0.03**2
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx**2
    syy = filt(y * y) - my**2
    sxy = filt(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return float(smap.mean())


def id_similarity(a: np.ndarray, b: np.ndarray, embedder: IdentityEmbedder) -> float:
    _check(a, b)
    ea, eb = embedder.embed(np.stack([a, b]))
    return cosine_similarity(ea, eb)


def evaluate(
    restored: np.ndarray,
    reference: np.ndarray,
    names: Sequence[str] | None = None,
    embedder: IdentityEmbedder | None = None,
) -> list[dict]:
    """Per-image metric rows followed by a ``mean`` row."""
    embedder = embedder or IdentityEmbedder(resolution=reference.shape[1])
    names = list(names) if names is not None else [f"{i:05d}" for i in range(len(reference))]
    rows = [
        {"image": n, "psnr": psnr(r, h), "ssim": ssim(r, h), "id_sim": id_similarity(r, h, embedder)}
        for n, r, h in zip(names, restored, reference)
    ]
    mean = {k: float(np.mean([row[k] for row in rows])) for k in ("psnr", "ssim", "id_sim")}
    return rows + [{"image": "mean", **mean}]


def write_report(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image", "psnr", "ssim", "id_sim"], delimiter="\t")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
