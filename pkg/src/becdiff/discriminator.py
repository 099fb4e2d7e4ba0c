"""Multi-resolution transformer discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .generator import ConfigError, multi_head_attention, timestep_embedding

# keeps the squashed score strictly inside (0, 1) in floating point
_EDGE = 1e-6


@dataclass
class DiscriminatorConfig:
    n_rois: int
    length: int
    n_scales: int = 4
    heads: int = 2
    embed_dim: int = 32
    single_scale: bool = False
    use_timestep: bool = False

    def __post_init__(self):
        if self.n_scales != 4:
            raise ConfigError("the discriminator uses exactly four scales")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide embed_dim={self.embed_dim}")
        if not self.single_scale and pyramid_lengths(self.length)[-1] < 2:
            raise ConfigError(f"length {self.length} too short for four scales")

    def scale_lengths(self) -> list[int]:
        return [self.length] if self.single_scale else pyramid_lengths(self.length)


def pyramid_lengths(d: int, n: int = 4) -> list[int]:
    out = [d]
    for _ in range(n - 1):
        out.append(math.ceil(out[-1] / 2))
    return out


def halve(f):
    """Average-pool pairs of time points; an odd trailing point is kept as is."""
    if f.shape[-1] % 2:
        f = torch.cat([f, f[..., -1:]], dim=-1)
    return f.unflatten(-1, (-1, 2)).mean(-1)


def downsample_pyramid(f, n: int = 4) -> list:
    if pyramid_lengths(f.shape[-1], n)[-1] < 2:
        raise ValueError(f"length {f.shape[-1]} too short for {n} scales")
    out = [f]
    for _ in range(n - 1):
        out.append(halve(out[-1]))
    return out


def squash(logit):
    return _EDGE + (1.0 - 2.0 * _EDGE) * torch.sigmoid(logit)


class SubDiscriminator(nn.Module):
    """Transformer encoder over ROI tokens with a mean-pooled logistic head."""

    def __init__(self, length: int, embed_dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.embed = nn.Linear(length, embed_dim)
        self.norm1 = nn.LayerNorm(embed_dim)
        scale = 1.0 / math.sqrt(embed_dim)
        self.wq = nn.Parameter(torch.randn(embed_dim, embed_dim) * scale)
        self.wk = nn.Parameter(torch.randn(embed_dim, embed_dim) * scale)
        self.wv = nn.Parameter(torch.randn(embed_dim, embed_dim) * scale)
        self.norm2 = nn.LayerNorm(embed_dim)
        self.ff1 = nn.Linear(embed_dim, embed_dim)
        self.ff2 = nn.Linear(embed_dim, embed_dim)
        self.head = nn.Linear(embed_dim, 1)
        self.last_weights = None

    def logit(self, f, t_emb=None):
        h = self.embed(f)
        if t_emb is not None:
            h = h + t_emb[:, None, :]
        a, w = multi_head_attention(self.norm1(h), self.wq, self.wk, self.wv, self.heads)
        self.last_weights = w.detach()
        h = h + a
        h = h + self.ff2(F.gelu(self.ff1(self.norm2(h))))
        return self.head(h.mean(dim=-2)).squeeze(-1)

    def forward(self, f, t_emb=None):
        return squash(self.logit(f, t_emb))


class Discriminator(nn.Module):
    """Average of four independent sub-discriminators on a time pyramid."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.subs = nn.ModuleList(
            SubDiscriminator(n, cfg.embed_dim, cfg.heads) for n in cfg.scale_lengths())
        self.t_proj = nn.Linear(16, cfg.embed_dim) if cfg.use_timestep else None

    def scores(self, f, t=None) -> list:
        squeeze = f.dim() == 2
        if squeeze:
            f = f.unsqueeze(0)
        t_emb = None
        if self.t_proj is not None:
            if t is None:
                raise ValueError("timestep-conditioned discriminator needs t")
            t_emb = self.t_proj(timestep_embedding(t, 16).to(f.dtype))
        scales = [f] if self.cfg.single_scale else downsample_pyramid(f, len(self.subs))
        out = [sub(x, t_emb) for sub, x in zip(self.subs, scales)]
        return [o.squeeze(0) for o in out] if squeeze else out

    def forward(self, f, t=None):
        return torch.stack(self.scores(f, t)).mean(0)
