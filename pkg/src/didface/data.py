"""Image corpora: PNG directories and a procedural face generator.

No face dataset ships with the package, so :func:`synthetic_faces` draws
cartoon portraits (head, hair, eyes, brows, nose, mouth, optional glasses)
with per-image identity parameters. They carry enough structure for the
restoration models to overfit and for degradations to visibly hurt.
"""

from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np

from .degradation import read_png, write_png
from .errors import ConfigurationError

DATA_ROOT_ENV = "DIDFACE_DATA"


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def _color(rng, lo=0, hi=255):
    return tuple(int(v) for v in rng.integers(lo, hi, size=3))


def synthetic_face(seed: int, size: int = 64, supersample: int = 4) -> np.ndarray:
    rng = np.random.default_rng(seed)
    s = size * supersample
    canvas = np.zeros((s, s, 3), np.uint8)

    # background: two-color vertical gradient plus faint stripes
    top, bottom = np.array(_color(rng)), np.array(_color(rng))
    ramp = np.linspace(0.0, 1.0, s)[:, None, None]
    canvas[:] = (top * (1 - ramp) + bottom * ramp).astype(np.uint8)
    freq = rng.uniform(4, 12)
    stripes = 18 * np.sin(np.linspace(0, freq * np.pi, s))[None, :, None]
    canvas = np.clip(canvas.astype(np.float64) + stripes, 0, 255).astype(np.uint8)

    cx = s // 2 + int(rng.integers(-s // 16, s // 16 + 1))
    cy = s // 2 + int(rng.integers(-s // 20, s // 20 + 1))
    fw = int(s * rng.uniform(0.24, 0.32))
    fh = int(s * rng.uniform(0.32, 0.40))
    skin = _color(rng, 90, 240)
    hair = _color(rng, 0, 160)

    cv2.ellipse(canvas, (cx, cy - fh // 4), (int(fw * 1.2), int(fh * 1.05)), 0, 180, 360, hair, -1, cv2.LINE_AA)
    cv2.rectangle(canvas, (cx - int(fw * 1.2), cy - fh // 4), (cx + int(fw * 1.2), cy + int(fh * rng.uniform(0.2, 0.9))), hair, -1)
    cv2.ellipse(canvas, (cx, cy + fh), (int(fw * 1.6), fh // 2), 0, 180, 360, _color(rng), -1, cv2.LINE_AA)
    cv2.ellipse(canvas, (cx, cy), (fw, fh), 0, 0, 360, skin, -1, cv2.LINE_AA)

    eye_dx = int(fw * rng.uniform(0.35, 0.5))
    eye_y = cy - int(fh * rng.uniform(0.05, 0.2))
    eye_r = max(2, int(fw * rng.uniform(0.14, 0.2)))
    iris = _color(rng, 0, 200)
    brow = tuple(max(0, c - 40) for c in hair)
    tilt = int(rng.integers(-12, 13))
    for sign in (-1, 1):
        ex = cx + sign * eye_dx
        cv2.ellipse(canvas, (ex, eye_y), (eye_r, int(eye_r * 0.7)), 0, 0, 360, (245, 245, 245), -1, cv2.LINE_AA)
        cv2.circle(canvas, (ex, eye_y), int(eye_r * 0.55), iris, -1, cv2.LINE_AA)
        cv2.circle(canvas, (ex, eye_y), max(1, int(eye_r * 0.25)), (10, 10, 10), -1, cv2.LINE_AA)
        by = eye_y - int(eye_r * 1.6)
        cv2.line(canvas, (ex - eye_r, by + sign * tilt // 4), (ex + eye_r, by - sign * tilt // 4), brow, max(2, s // 48), cv2.LINE_AA)

    nose_len = int(fh * rng.uniform(0.2, 0.35))
    shade = tuple(max(0, c - 50) for c in skin)
    cv2.line(canvas, (cx, eye_y + eye_r), (cx + s // 64, eye_y + eye_r + nose_len), shade, max(2, s // 80), cv2.LINE_AA)

    mouth_y = cy + int(fh * rng.uniform(0.45, 0.6))
    mouth_w = int(fw * rng.uniform(0.3, 0.55))
    smile = int(rng.integers(-3, 8))
    lips = _color(rng, 60, 220)
    cv2.ellipse(canvas, (cx, mouth_y), (mouth_w, max(2, int(mouth_w * 0.25) + smile)), 0, 0, 180, lips, max(2, s // 40), cv2.LINE_AA)

    if rng.random() < 0.3:
        frame = _color(rng, 0, 90)
        for sign in (-1, 1):
            cv2.circle(canvas, (cx + sign * eye_dx, eye_y), int(eye_r * 1.6), frame, max(2, s // 80), cv2.LINE_AA)
        cv2.line(canvas, (cx - eye_dx + int(eye_r * 1.6), eye_y), (cx + eye_dx - int(eye_r * 1.6), eye_y), frame, max(2, s // 80), cv2.LINE_AA)

    small = cv2.resize(canvas, (size, size), interpolation=cv2.INTER_AREA)
    return (small.astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def synthetic_faces(n: int, size: int = 64, seed: int = 0) -> np.ndarray:
    """Stack of ``n`` procedural faces, shape ``(n, size, size, 3)``."""
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return np.stack([synthetic_face(int(sd), size) for sd in seeds])


def load_image_dir(path: str | Path, size: int | None = None) -> tuple[list[str], np.ndarray]:
    """Read every ``*.png`` under ``path`` in sorted order."""
    paths = sorted(Path(path).glob("*.png"))
    if not paths:
        raise ConfigurationError(f"no PNG images found in {path}")
    imgs = [read_png(p) for p in paths]
    if size is not None:
        for p, im in zip(paths, imgs):
            if im.shape[:2] != (size, size):
                raise ConfigurationError(f"{p} is {im.shape[0]}x{im.shape[1]}, expected {size}x{size}")
    return [str(p) for p in paths], np.stack(imgs)


def write_image_dir(path: str | Path, images: np.ndarray, names: list[str] | None = None) -> list[str]:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    names = names or [f"{i:05d}.png" for i in range(len(images))]
    written = []
    for name, img in zip(names, images):
        target = out / Path(name).name
        write_png(target, img)
        written.append(str(target))
    return written
