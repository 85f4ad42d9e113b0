"""Conditional noise predictor over the augmented cloud ``[x_t, z]``."""
from __future__ import annotations

import math
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn
from torch.nn import functional as F

from fvp.diffusion import NoiseSchedule


class DenoiserConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    hidden_width: int = 128
    depth: int = 3
    time_embed_dim: int = 32
    voxel_branch: bool = False
    voxel_grid: int = 4
    parameterization: Literal["residual", "eps"] = "residual"
    residual_scale: float = 0.005

    @model_validator(mode="after")
    def _check(self):
        if self.hidden_width < 1 or self.depth < 1:
            raise ValueError("hidden_width and depth must be >= 1")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a positive even integer")
        if self.residual_scale <= 0:
            raise ValueError("residual_scale must be positive")
        if self.voxel_branch and self.voxel_grid < 2:
            raise ValueError("voxel_grid must be >= 2 when the voxel branch is on")
        return self


def time_embedding(t, dim: int, T: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal embedding ``[sin(t * w_j), cos(t * w_j)]`` with ``w_j = 10000**(-j / (dim/2))``.

    ``t`` may be an int or a 1-d integer tensor; the result has shape
    ``(dim,)`` or ``(B, dim)`` respectively.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"dim must be a positive even integer, got {dim}")
    tt = torch.as_tensor(t)
    if tt.numel() == 0 or int(tt.min()) < 1 or int(tt.max()) > T:
        raise ValueError(f"timestep {t} outside [1, {T}]")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = tt.to(torch.float64)[..., None] * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1).to(dtype)


def voxel_gather(coords: torch.Tensor, values: torch.Tensor, grid: int) -> torch.Tensor:
    """Mean-pool ``values`` into a ``grid**3`` lattice over [-1, 1]^3 and read each point's cell back.

    ``coords`` is ``(..., N, 3)``, ``values`` is ``(..., N, F)``. Coordinates
    outside the box are clamped. Cell indices carry no gradient.
    """
    lead = values.shape[:-2]
    n, f = values.shape[-2:]
    b = int(torch.tensor(lead).prod()) if lead else 1
    with torch.no_grad():
        cell = ((coords.clamp(-1.0, 1.0) + 1.0) * 0.5 * grid).floor().long().clamp(0, grid - 1)
        flat = (cell[..., 0] * grid + cell[..., 1]) * grid + cell[..., 2]
        flat = flat.reshape(b, n) + torch.arange(b)[:, None] * grid**3
        flat = flat.reshape(-1)
    vals = values.reshape(b * n, f)
    sums = vals.new_zeros(b * grid**3, f).index_add(0, flat, vals)
    counts = vals.new_zeros(b * grid**3).index_add(0, flat, vals.new_ones(b * n))
    means = sums / counts.clamp(min=1.0)[:, None]
    return means[flat].reshape(*lead, n, f)


class Denoiser(nn.Module):
    """Shared per-point MLP with time embedding, max-pooled context and optional voxel features."""

    def __init__(self, cond_channels: int, config: DenoiserConfig, schedule: NoiseSchedule):
        super().__init__()
        self.config = config
        self.cond_channels = cond_channels
        self.num_steps = schedule.num_steps
        ab = torch.as_tensor(schedule.alpha_bars)
        self.register_buffer("sqrt_ab", ab.sqrt().float(), persistent=False)
        self.register_buffer("sqrt_1mab", (1.0 - ab).sqrt().float(), persistent=False)
        h, e = config.hidden_width, config.time_embed_dim
        d = 3 + cond_channels
        self.inp = nn.Linear(d + e, h)
        # the pooled context sees only the noisy iterate, so scene-level
        # information about the condition has to come from z's pooled channels
        self.ctx_in = nn.Linear(3 + e, h)
        self.ctx = nn.Linear(h, h)
        self.time_mlp = nn.Sequential(nn.Linear(e, h), nn.SiLU())
        in_main = d + h + h + (h if config.voxel_branch else 0)
        self.hidden = nn.ModuleList(
            [nn.Linear(in_main if i == 0 else h, h) for i in range(config.depth)]
        )
        # per-layer scale and shift from the time embedding
        self.film = nn.ModuleList([nn.Linear(h, 2 * h) for _ in range(config.depth)])
        self.out = nn.Linear(h, 3)
        if config.parameterization == "residual" and cond_channels < 3:
            raise ValueError("the residual parameterization reads an anchor from the first 3 condition channels")

    def forward(self, aug: torch.Tensor, t) -> torch.Tensor:
        """``aug`` is ``(B, N, 3 + C)`` or ``(N, 3 + C)``; ``t`` an int or ``(B,)`` tensor."""
        single = aug.ndim == 2
        if single:
            aug = aug[None]
        b, n, width = aug.shape
        if width != 3 + self.cond_channels:
            raise ValueError(f"augmented cloud has {width} columns, expected {3 + self.cond_channels}")
        temb = time_embedding(t, self.config.time_embed_dim, self.num_steps, aug.dtype)
        temb = temb.reshape(-1, 1, temb.shape[-1])
        tfeat = self.time_mlp(temb)
        temb_n = temb.expand(b, n, -1)
        h0 = F.silu(self.inp(torch.cat([aug, temb_n], dim=-1)))
        hx = F.silu(self.ctx_in(torch.cat([aug[..., :3], temb_n], dim=-1)))
        g = self.ctx(hx).max(dim=1).values[:, None, :].expand(b, n, -1)
        parts = [aug, h0, g]
        if self.config.voxel_branch:
            parts.append(voxel_gather(aug[..., :3], h0, self.config.voxel_grid))
        x = torch.cat(parts, dim=-1)
        for layer, film in zip(self.hidden, self.film):
            scale, shift = film(tfeat).chunk(2, dim=-1)
            x = F.silu(layer(x) * (1.0 + scale) + shift)
        out = self.out(x)
        if self.config.parameterization == "residual":
            out = self._residual_to_noise(aug, out, t)
        return out[0] if single else out

    def _residual_to_noise(self, aug, f, t):
        # The clean cloud is modelled as anchor + r with r of scale s. Blend the
        # linear least-squares estimate of r from x_t with the network output so
        # that f has a unit-scale target at every t, then convert to noise.
        tt = torch.as_tensor(t).reshape(-1)
        sa = self.sqrt_ab.to(aug.dtype)[tt].reshape(-1, 1, 1)
        sb = self.sqrt_1mab.to(aug.dtype)[tt].reshape(-1, 1, 1)
        s = self.config.residual_scale
        xt, anchor = aug[..., :3], aug[..., 3:6]
        denom = sa * sa * s * s + sb * sb
        x0 = anchor + (sa * s * s / denom) * (xt - sa * anchor) + (sb * s / denom.sqrt()) * f
        return (xt - sa * x0) / sb


def init_denoiser(cond_channels: int, config: DenoiserConfig, schedule: NoiseSchedule,
                  rng_seed: int) -> Denoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng_seed))
        return Denoiser(cond_channels, config, schedule)


def predict_noise(denoiser: Denoiser, aug, t: int) -> torch.Tensor:
    """Validated single-cloud entry point: ``aug`` is ``(N, 3 + C)``."""
    aug = torch.as_tensor(aug, dtype=next(denoiser.parameters()).dtype)
    if aug.ndim != 2:
        raise ValueError(f"expected an (N, 3 + C) augmented cloud, got shape {tuple(aug.shape)}")
    if not torch.isfinite(aug).all():
        raise ValueError("augmented cloud contains non-finite entries")
    return denoiser(aug, t)
