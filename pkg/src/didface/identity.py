"""Frozen face-identity embedder and cosine similarity.

The embedder is a small convolutional network with fixed random weights. It is
not a face recognizer; it is a deterministic, image-dependent 128-d signal that
drives the identity modulation. Callers with a real recognizer can supply
precomputed vectors through :class:`EmbeddingOverrides`.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import images_to_tensor
from .errors import ConfigurationError, DomainError, ShapeError

EMBED_DIM = 128


class IdentityEmbedder(nn.Module):
    def __init__(self, resolution: int = 64, dim: int = EMBED_DIM, seed: int = 1234):
        super().__init__()
        self.resolution = resolution
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        chans = [3, 16, 32, 64]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        side = resolution // 8
        self.proj = nn.Linear(chans[-1] * side * side, dim)
        with torch.no_grad():
            for p in self.parameters():
                fan_in = p[0].numel() if p.ndim > 1 else 1
                p.copy_(torch.randn(p.shape, generator=gen) / np.sqrt(fan_in) if p.ndim > 1 else torch.zeros(p.shape))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.resolution
        if x.ndim != 4 or x.shape[-2:] != (r, r):
            raise ShapeError(f"expected N x 3 x {r} x {r} images, got {tuple(x.shape)}")
        # remove the global brightness so embeddings spread around the sphere
        h = x - x.mean(dim=(1, 2, 3), keepdim=True)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), 0.2)
        e = self.proj(h.flatten(1))
        e = e - e.mean(dim=1, keepdim=True)
        return F.normalize(e, dim=1, eps=1e-12)

    @torch.no_grad()
    def embed(self, images: np.ndarray) -> np.ndarray:
        """``(N, H, W, 3)`` or single ``(H, W, 3)`` images -> unit vectors."""
        single = np.ndim(images) == 3
        out = self(images_to_tensor(images)).numpy()
        return out[0] if single else out


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class EmbeddingOverrides:
    """Per-image embeddings loaded from a JSON map ``{path: [128 floats]}``."""

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = {}
        for key, vec in table.items():
            v = np.asarray(vec, dtype=np.float32)
            if v.shape != (EMBED_DIM,):
                raise ConfigurationError(f"override for {key} has shape {v.shape}, expected ({EMBED_DIM},)")
            n = np.linalg.norm(v)
            if n == 0:
                raise ConfigurationError(f"override for {key} is a zero vector")
            self.table[key] = v / n

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingOverrides":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"embedding override file not found: {p}")
        return cls(json.loads(p.read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({k: v.tolist() for k, v in sorted(self.table.items())}))

    def get(self, key: str) -> np.ndarray | None:
        return self.table.get(key, self.table.get(Path(key).name))
