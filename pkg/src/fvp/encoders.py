"""3D encoders mapping history frames to the per-point latent condition.

Two encoder kinds share one output layout. For ``z_mode="split"`` the latent
``z`` of shape ``(N, channels)`` is::

    z[:, :3]                raw coordinates of the most recent frame
    z[:, 3:local_channels]  learned per-point features of that frame
    z[:, local_channels:]   pooled context over all history frames, broadcast

so only the first two blocks depend on point order. ``local_channels`` is
``channels // 2``. ``z_mode="global"`` uses the pooled context for every
channel.

Layer widths (defaults, ``mlp_pool``, ``k`` history frames, ``A``-dim actions)::

    trunk        Linear(3, 64) ReLU Linear(64, 128)         shared over points
    local proj   Linear(3 + 128, 29)                        coords ++ trunk feature
    action emb   Linear(k * A, 16) ReLU                     only with use_actions
    pooled proj  Linear(k * 128 [+ 16], 32)                 max-pooled trunk per frame

With ``k = 1`` and no actions that is 256 + 8320 + 3828 + 4128 = 16532
parameters.

The ``hierarchical`` kind replaces the trunk with one set-abstraction level:
``n_centroids`` farthest-point centroids, ``group_size`` nearest neighbours
each, a shared MLP over ``(relative xyz, centroid xyz)`` max-pooled per
group. Each point takes the feature of its nearest centroid.
"""
from __future__ import annotations

from typing import Literal, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, model_validator
from torch import nn


class EncoderConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    encoder_kind: Literal["mlp_pool", "hierarchical"] = "mlp_pool"
    channels: int = 64
    history_frames: int = 1
    use_actions: bool = False
    action_dim: int = 3
    z_mode: Literal["split", "global"] = "split"
    widths: tuple[int, ...] = (64, 128)
    action_embed_dim: int = 16
    n_centroids: int = 32
    group_size: int = 16

    @model_validator(mode="after")
    def _check(self):
        if self.channels < 1 or self.history_frames < 1:
            raise ValueError("channels and history_frames must be >= 1")
        if self.use_actions and self.action_dim < 1:
            raise ValueError("use_actions requires action_dim >= 1")
        if self.action_dim < 0 or not self.widths or min(self.widths) < 1:
            raise ValueError("widths must be non-empty positive integers")
        if self.z_mode == "split" and self.channels < 6:
            raise ValueError("split mode needs at least 6 channels")
        if self.n_centroids < 1 or self.group_size < 1:
            raise ValueError("n_centroids and group_size must be >= 1")
        return self

    @property
    def pooled_channels(self) -> int:
        if self.z_mode == "global":
            return self.channels
        return self.channels - self.channels // 2

    @property
    def local_channels(self) -> int:
        return self.channels - self.pooled_channels


def _mlp(widths: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(widths) - 1):
        layers.append(nn.Linear(widths[i], widths[i + 1]))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


@torch.no_grad()
def batched_fps(xyz: torch.Tensor, m: int) -> torch.Tensor:
    """Farthest-point indices ``(B, m)``; starts at the point farthest from the mean.

    The geometric start makes the selected set independent of point order.
    """
    b, n, _ = xyz.shape
    m = min(m, n)
    center = xyz.mean(dim=1, keepdim=True)
    far = ((xyz - center) ** 2).sum(-1).argmax(dim=1)
    idx = torch.empty(b, m, dtype=torch.long)
    dist = torch.full((b, n), float("inf"), dtype=xyz.dtype)
    rows = torch.arange(b)
    for i in range(m):
        idx[:, i] = far
        d = ((xyz - xyz[rows, far][:, None, :]) ** 2).sum(-1)
        dist = torch.minimum(dist, d)
        far = dist.argmax(dim=1)
    return idx


class PointEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        feat = c.widths[-1]
        if c.encoder_kind == "mlp_pool":
            self.trunk = _mlp((3,) + tuple(c.widths))
        else:
            self.trunk = _mlp((6,) + tuple(c.widths))
        ctx_dim = c.history_frames * feat
        if c.use_actions:
            self.action_embed = nn.Sequential(
                nn.Linear(c.history_frames * c.action_dim, c.action_embed_dim), nn.ReLU()
            )
            ctx_dim += c.action_embed_dim
        self.pooled_proj = nn.Linear(ctx_dim, c.pooled_channels)
        if c.local_channels > 3:
            self.local_proj = nn.Linear(3 + feat, c.local_channels - 3)

    def _frame_features(self, pts: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-point ``(M, N, F)`` and pooled ``(M, F)`` features for frames ``(M, N, 3)``."""
        if self.config.encoder_kind == "mlp_pool":
            f = self.trunk(pts)
            return f, f.max(dim=1).values
        m, n, _ = pts.shape
        with torch.no_grad():
            cidx = batched_fps(pts, self.config.n_centroids)
            rows = torch.arange(m)[:, None]
            centers = pts[rows, cidx]  # (M, S, 3)
            d = torch.cdist(centers, pts)  # (M, S, N)
            kk = min(self.config.group_size, n)
            gidx = d.topk(kk, dim=2, largest=False).indices  # (M, S, K)
            owner = d.argmin(dim=1)  # (M, N) nearest centroid per point
        grouped = pts[rows[:, :, None], gidx]  # (M, S, K, 3)
        cen = centers[:, :, None, :].expand_as(grouped)
        h = self.trunk(torch.cat([grouped - cen, cen], dim=-1)).max(dim=2).values  # (M, S, F)
        per_point = h[rows, owner]  # (M, N, F)
        return per_point, h.max(dim=1).values

    def forward(self, history: torch.Tensor, actions: torch.Tensor | None = None) -> torch.Tensor:
        """``history`` is ``(B, k, N, 3)`` oldest first; returns ``z`` of shape ``(B, N, C)``."""
        z, _ = self._encode(history, actions)
        return z

    def pooled(self, history: torch.Tensor, actions: torch.Tensor | None = None) -> torch.Tensor:
        """The permutation-invariant channels of ``z``, shape ``(B, pooled_channels)``."""
        _, pooled = self._encode(history, actions)
        return pooled

    def _encode(self, history, actions):
        c = self.config
        b, k, n, _ = history.shape
        if k != c.history_frames:
            raise ValueError(f"expected {c.history_frames} history frames, got {k}")
        per_point, pooled_feat = self._frame_features(history.reshape(b * k, n, 3))
        ctx = pooled_feat.reshape(b, -1)
        if c.use_actions:
            if actions is None or tuple(actions.shape) != (b, k, c.action_dim):
                got = None if actions is None else tuple(actions.shape)
                raise ValueError(f"expected actions of shape {(b, k, c.action_dim)}, got {got}")
            ctx = torch.cat([ctx, self.action_embed(actions.reshape(b, -1))], dim=-1)
        pooled = self.pooled_proj(ctx)
        broadcast = pooled[:, None, :].expand(b, n, pooled.shape[-1])
        if c.local_channels == 0:
            return broadcast, pooled
        latest = per_point.reshape(b, k, n, -1)[:, -1]
        xyz = history[:, -1]
        if c.local_channels == 3:
            return torch.cat([xyz, broadcast], dim=-1), pooled
        local = self.local_proj(torch.cat([xyz, latest], dim=-1))
        return torch.cat([xyz, local, broadcast], dim=-1), pooled


def init_encoder(config: EncoderConfig, rng_seed: int) -> PointEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(rng_seed))
        return PointEncoder(config)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def encode(
    encoder: PointEncoder,
    history: Sequence,
    actions: Sequence | None = None,
) -> torch.Tensor:
    """Encode one sample: ``history`` is a list of ``k`` clouds ``(N, 3)``.

    Returns the latent ``(N, C)``.
    """
    dtype = next(encoder.parameters()).dtype
    frames = [torch.as_tensor(np.asarray(h), dtype=dtype) for h in history]
    if not frames:
        raise ValueError("history is empty")
    sizes = {tuple(f.shape) for f in frames}
    if len(sizes) != 1:
        raise ValueError(f"history frames disagree in shape: {sorted(sizes)}")
    hist = torch.stack(frames)[None]
    act = None
    if actions is not None:
        if len(actions) != len(frames):
            raise ValueError(f"{len(actions)} actions for {len(frames)} history frames")
        act = torch.as_tensor(np.asarray(actions), dtype=dtype)[None]
    elif encoder.config.use_actions:
        raise ValueError("encoder was configured with use_actions but no actions were given")
    if not encoder.config.use_actions:
        act = None
    return encoder(hist, act)[0]
