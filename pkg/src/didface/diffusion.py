"""Noise schedule, forward noising, epsilon loss and spaced ancestral sampling.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and the schedule
arrays are indexed with ``t - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DomainError, ParameterError, ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ParameterError(f"timestep outside 1..{self.T}: {t}")
        return self.alpha_bars[t - 1]


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _ab(sched_or_ab, t, like: torch.Tensor) -> torch.Tensor:
    if isinstance(sched_or_ab, NoiseSchedule):
        ab = sched_or_ab.alpha_bar(t.detach().cpu().numpy() if torch.is_tensor(t) else t)
    else:
        ab = np.asarray(sched_or_ab, dtype=np.float64)
    ab = torch.as_tensor(ab, dtype=like.dtype, device=like.device)
    if ab.ndim == 1 and like.ndim > 1:
        ab = ab.view(-1, *([1] * (like.ndim - 1)))
    return ab


def q_sample(z: torch.Tensor, t, eps: torch.Tensor, sched) -> torch.Tensor:
    """Noise ``z`` to step ``t``. ``sched`` may also be a raw alpha-bar value."""
    if z.shape != eps.shape:
        raise ShapeError(f"z {tuple(z.shape)} and eps {tuple(eps.shape)} differ")
    ab = _ab(sched, t, z)
    return ab.sqrt() * z + (1.0 - ab).sqrt() * eps


def ldm_loss(eps_pred: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_pred.shape != eps.shape:
        raise ShapeError(f"eps_pred {tuple(eps_pred.shape)} and eps {tuple(eps.shape)} differ")
    return F.mse_loss(eps_pred, eps)


def predict_z0(z_t: torch.Tensor, eps_pred: torch.Tensor, t, sched) -> torch.Tensor:
    ab = _ab(sched, t, z_t)
    if torch.any(ab <= 0):
        raise DomainError("alpha_bar is zero; z0 estimate is singular")
    return z_t / ab.sqrt() - (1.0 - ab).sqrt() * eps_pred / ab.sqrt()


def spaced_timesteps(T: int, n: int) -> list[int]:
    """``n`` evenly spaced steps ``floor(k T / n)``, ``k = 1..n``; always ends at ``T``."""
    if not 1 <= n <= T:
        raise ParameterError(f"need 1 <= n <= T, got n={n}, T={T}")
    return [(k * T) // n for k in range(1, n + 1)]


@dataclass(frozen=True)
class SubSchedule:
    """Posterior coefficients for ancestral sampling over a strided subset."""

    steps: list[int]
    alpha_bars: np.ndarray
    alpha_bars_prev: np.ndarray
    betas: np.ndarray
    posterior_variance: np.ndarray
    coef_z0: np.ndarray
    coef_zt: np.ndarray

    @classmethod
    def build(cls, sched: NoiseSchedule, n_steps: int) -> "SubSchedule":
        steps = spaced_timesteps(sched.T, n_steps)
        ab = sched.alpha_bar(np.array(steps))
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        betas = 1.0 - ab / ab_prev
        var = betas * (1.0 - ab_prev) / (1.0 - ab)
        coef_z0 = np.sqrt(ab_prev) * betas / (1.0 - ab)
        coef_zt = np.sqrt(1.0 - betas) * (1.0 - ab_prev) / (1.0 - ab)
        return cls(steps, ab, ab_prev, betas, var, coef_z0, coef_zt)


Denoiser = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def ddpm_sample(
    denoiser: Denoiser,
    shape: Sequence[int],
    sched: NoiseSchedule,
    n_steps: int = 50,
    seed: int | Sequence[int] = 0,
    clip_z0: float | None = None,
) -> torch.Tensor:
    """Ancestral DDPM sampling from pure noise over ``spaced_timesteps``.

    ``denoiser(z_t, t)`` receives a batch of 1-based timesteps and returns the
    predicted noise. Any conditioning is closed over by the caller. ``seed``
    may be a list with one seed per batch item, which makes each sample
    independent of what else is in the batch.
    """
    sub = SubSchedule.build(sched, n_steps)
    shape = tuple(shape)
    if isinstance(seed, (int, np.integer)):
        gens = [torch.Generator().manual_seed(int(seed))]
        draw = lambda: torch.randn(shape, generator=gens[0])
    else:
        if len(seed) != shape[0]:
            raise ShapeError(f"{len(seed)} seeds for a batch of {shape[0]}")
        gens = [torch.Generator().manual_seed(int(s)) for s in seed]
        draw = lambda: torch.stack([torch.randn(shape[1:], generator=g) for g in gens])
    z = draw()
    for k in reversed(range(len(sub.steps))):
        t = torch.full((shape[0],), sub.steps[k], dtype=torch.long)
        eps = denoiser(z, t)
        z0 = predict_z0(z, eps, None, float(sub.alpha_bars[k]))
        if clip_z0 is not None:
            z0 = z0.clamp(-clip_z0, clip_z0)
        mean = float(sub.coef_z0[k]) * z0 + float(sub.coef_zt[k]) * z
        if k > 0:
            z = mean + float(np.sqrt(sub.posterior_variance[k])) * draw()
        else:
            z = mean
    return z
