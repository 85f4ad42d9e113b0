"""DDPM machinery: noise schedule, forward corruption, loss and reverse sampling.

Arrays may be numpy arrays or torch tensors; the arithmetic is written so both
work. Timesteps are 1-based (``1 <= t <= T``) and ``alpha_bars[0] == 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # (T,), betas[t - 1] is beta_t
    alphas: np.ndarray  # (T,)
    alpha_bars: np.ndarray  # (T + 1,), alpha_bars[0] == 1

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def check_t(self, t) -> None:
        tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if tt.size == 0 or tt.min() < 1 or tt.max() > self.num_steps:
            raise ValueError(f"timestep {t} outside [1, {self.num_steps}]")


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("betas must be a non-empty 1-d sequence")
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.empty(betas.size + 1, dtype=np.float64)
    alpha_bars[0] = 1.0
    for i, a in enumerate(alphas):
        alpha_bars[i + 1] = alpha_bars[i] * a
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def make_linear_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    return schedule_from_betas(betas)


def _coef(values: np.ndarray, t, like):
    """Gather ``values[t]`` shaped to broadcast against ``like`` (batch-leading)."""
    if isinstance(t, (int, np.integer)):
        return float(values[t])
    idx = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
    out = values[idx].reshape(idx.shape + (1,) * (like.ndim - idx.ndim))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(out, dtype=like.dtype)
    return out


def forward_sample(x0, t, noise, schedule: NoiseSchedule):
    """Closed-form corruption ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * noise``.

    ``t`` may be an int or an integer array with one entry per leading batch
    element of ``x0``.
    """
    schedule.check_t(t)
    if tuple(noise.shape) != tuple(x0.shape):
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    sa = _coef(np.sqrt(schedule.alpha_bars), t, x0)
    sb = _coef(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
    return sa * x0 + sb * noise


def iterated_forward_sample(x0, t: int, schedule: NoiseSchedule, rng_seed: int) -> np.ndarray:
    """Apply the one-step Gaussian kernel ``t`` times with fresh noise each step."""
    schedule.check_t(t)
    rng = np.random.default_rng(rng_seed)
    x = np.asarray(x0, dtype=np.float64)
    for s in range(1, t + 1):
        beta = schedule.beta(s)
        x = np.sqrt(1.0 - beta) * x + np.sqrt(beta) * rng.standard_normal(x.shape)
    return x


def predicted_x0(x_t, eps, t: int, schedule: NoiseSchedule):
    """Invert the closed-form corruption given the noise."""
    schedule.check_t(t)
    ab = schedule.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def diffusion_loss(eps_pred, eps_true):
    """Mean squared error over every entry."""
    if tuple(eps_pred.shape) != tuple(eps_true.shape):
        raise ValueError(
            f"shape mismatch: predicted {tuple(eps_pred.shape)} vs true {tuple(eps_true.shape)}"
        )
    return ((eps_pred - eps_true) ** 2).mean()


def reverse_step(x_t, eps_pred, t: int, schedule: NoiseSchedule, noise):
    """One ancestral DDPM step with posterior variance ``sigma_t**2 = beta_t``."""
    schedule.check_t(t)
    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    mean = (x_t - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(alpha)
    return mean + math.sqrt(beta) * noise


NoisePredictor = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample_next_frame(
    denoiser: NoisePredictor,
    condition,
    schedule: NoiseSchedule,
    n_points: int,
    rng_seed: int,
) -> np.ndarray:
    """Generate a cloud by denoising standard normal noise under ``condition``.

    ``denoiser(aug, t)`` receives the ``(n_points, 3 + C)`` augmented cloud
    (current iterate with the condition re-attached) and returns the
    predicted noise.
    """
    cond = torch.as_tensor(condition)
    if cond.ndim != 2 or cond.shape[0] != n_points:
        raise ValueError(f"condition shape {tuple(cond.shape)} does not have {n_points} rows")
    gen = torch.Generator().manual_seed(int(rng_seed))
    x = torch.randn(n_points, 3, generator=gen, dtype=cond.dtype)
    for t in range(schedule.num_steps, 0, -1):
        eps = denoiser(torch.cat([x, cond], dim=1), t)
        if t > 1:
            noise = torch.randn(n_points, 3, generator=gen, dtype=cond.dtype)
        else:
            noise = torch.zeros_like(x)
        x = reverse_step(x, eps, t, schedule, noise)
    return x.numpy()


@torch.no_grad()
def sample_next_frames(
    denoiser: NoisePredictor,
    conditions: torch.Tensor,
    schedule: NoiseSchedule,
    rng_seeds,
) -> np.ndarray:
    """Batched ``sample_next_frame``: ``conditions`` is ``(B, N, C)``, one seed per sample.

    Every sample draws its noise from its own generator, so results do not
    depend on which other samples share the batch.
    """
    cond = torch.as_tensor(conditions)
    b, n, _ = cond.shape
    if len(rng_seeds) != b:
        raise ValueError(f"{len(rng_seeds)} seeds for {b} conditions")
    gens = [torch.Generator().manual_seed(int(s)) for s in rng_seeds]

    def draw():
        return torch.stack([torch.randn(n, 3, generator=g, dtype=cond.dtype) for g in gens])

    x = draw()
    for t in range(schedule.num_steps, 0, -1):
        eps = denoiser(torch.cat([x, cond], dim=-1), torch.full((b,), t))
        x = reverse_step(x, eps, t, schedule, draw() if t > 1 else torch.zeros_like(x))
    return x.numpy()
