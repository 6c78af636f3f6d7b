"""Schema-versioned checkpoint archives of named tensors plus metadata."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path
from typing import Mapping

import torch

from .errors import ConfigurationError

SCHEMA_VERSION = 1


def state_hash(tensors: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save(path: str | Path, kind: str, tensors: Mapping[str, torch.Tensor], meta: dict) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": {k: v.detach().cpu().clone() for k, v in sorted(tensors.items())},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path, kind: str | None = None) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"checkpoint not found: {p}")
    payload = torch.load(p, map_location="cpu", weights_only=True)
    if payload.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"{p}: unsupported schema version {payload.get('schema_version')}")
    if kind is not None and payload.get("kind") != kind:
        raise ConfigurationError(f"{p}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload
