"""Hierarchical spatiotemporal transformer generator and the BEC estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


class BecError(ArithmeticError):
    pass


@dataclass
class GeneratorConfig:
    n_rois: int
    length: int
    base_channels: int = 2
    heads: int = 1
    levels: int = 2
    blocks_per_level: Sequence[int] = field(default_factory=lambda: (2, 2))
    timestep_embed_dim: int = 16
    ridge_lambda: float = 1e-2
    no_hierarchy: bool = False
    sete_as_conv: bool = False
    no_sma: bool = False
    no_tma: bool = False

    def __post_init__(self):
        self.blocks_per_level = tuple(int(b) for b in self.blocks_per_level)
        self.validate()

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def lengths(self) -> list[int]:
        out = [self.length]
        for _ in range(self.levels):
            out.append(math.ceil(out[-1] / 2))
        return out

    def validate(self) -> None:
        if min(self.n_rois, self.length, self.base_channels, self.heads, self.levels,
               self.timestep_embed_dim) < 1:
            raise ConfigError("all generator dimensions must be positive")
        if len(self.blocks_per_level) != self.levels:
            raise ConfigError(
                f"blocks_per_level has {len(self.blocks_per_level)} entries for {self.levels} levels")
        if self.ridge_lambda <= 0:
            raise ConfigError("ridge_lambda must be positive")
        n_levels = 1 if self.no_hierarchy else self.levels
        for i in range(n_levels):
            if self.channels(i) % self.heads:
                raise ConfigError(f"heads={self.heads} does not divide {self.channels(i)} channels")
        if not self.no_hierarchy and self.lengths()[-2] < 2:
            raise ConfigError(f"length {self.length} too short for {self.levels} levels")
        if self.sete_as_conv and (self.no_sma or self.no_tma):
            raise ConfigError("sete_as_conv cannot be combined with no_sma/no_tma")
        if self.no_sma and self.no_tma:
            raise ConfigError("no_sma and no_tma together remove the SeTe block entirely")


# ---------------------------------------------------------------- attention


def multi_head_attention(x, wq, wk, wv, heads: int):
    """Scaled dot-product attention over the second-to-last axis.

    Args:
        x: tokens, shape (..., n_tokens, C).
        wq, wk, wv: (C, C) projections; columns [h*C/H:(h+1)*C/H] belong to head h.
        heads: number of heads H.

    Returns:
        (output with the shape of x, attention weights of shape (..., H, n_tokens, n_tokens)).
    """
    c = x.shape[-1]
    dh = c // heads

    def split(m):
        return m.unflatten(-1, (heads, dh)).transpose(-3, -2)

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (w @ v).transpose(-3, -2).flatten(-2)
    return out, w


class AxisAttention(nn.Module):
    """Multi-head attention along the ROI axis (spatial) or time axis (temporal)."""

    def __init__(self, channels: int, heads: int, axis: str):
        super().__init__()
        if channels % heads:
            raise ConfigError(f"heads={heads} does not divide {channels} channels")
        if axis not in ("spatial", "temporal"):
            raise ValueError(axis)
        self.heads = heads
        self.axis = axis
        scale = 1.0 / math.sqrt(channels)
        self.wq = nn.Parameter(torch.randn(channels, channels) * scale)
        self.wk = nn.Parameter(torch.randn(channels, channels) * scale)
        self.wv = nn.Parameter(torch.randn(channels, channels) * scale)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, x):
        # x is channels-last: (B, N, L, C)
        tokens = x.transpose(1, 2) if self.axis == "spatial" else x
        out, w = multi_head_attention(tokens, self.wq, self.wk, self.wv, self.heads)
        self.last_weights = w.detach()
        return out.transpose(1, 2) if self.axis == "spatial" else out


class SeTeBlock(nn.Module):
    """Residual spatial attention followed by residual temporal attention on (B, C, N, L)."""

    def __init__(self, channels: int, heads: int, use_sma: bool = True, use_tma: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels) if use_sma else None
        self.sma = AxisAttention(channels, heads, "spatial") if use_sma else None
        self.norm2 = nn.LayerNorm(channels) if use_tma else None
        self.tma = AxisAttention(channels, heads, "temporal") if use_tma else None

    def forward(self, x):
        h = x.permute(0, 2, 3, 1)
        if self.sma is not None:
            h = self.sma(self.norm1(h)) + h
        if self.tma is not None:
            h = self.tma(self.norm2(h)) + h
        return h.permute(0, 3, 1, 2)


class ConvBlock(nn.Module):
    """Per-ROI 1x3 convolution used in place of a SeTe block."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, (1, 3), padding=(0, 1))

    def forward(self, x):
        return x + F.gelu(self.conv(x))


# ------------------------------------------------------- temporal resampling


class TDS(nn.Module):
    """Stride-2 per-ROI convolution: (B, C_in, N, L) -> (B, C_out, N, ceil(L/2))."""

    def __init__(self, c_in: int, c_out: Optional[int] = None):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out or 2 * c_in, (1, 3), stride=(1, 2), padding=(0, 1))

    def forward(self, x):
        if x.shape[-1] < 2:
            raise ValueError(f"TDS needs length >= 2, got {x.shape[-1]}")
        return self.conv(x)


class TUS(nn.Module):
    """Stride-2 transposed convolution cropped to a recorded target length."""

    def __init__(self, c_in: int, c_out: Optional[int] = None):
        super().__init__()
        if c_out is None:
            if c_in % 2:
                raise ConfigError(f"TUS halves channels, got odd count {c_in}")
            c_out = c_in // 2
        self.conv = nn.ConvTranspose2d(c_in, c_out, (1, 3), stride=(1, 2), padding=(0, 1),
                                       output_padding=(0, 1))

    def forward(self, x, target_length: int):
        if target_length is None:
            raise ValueError("TUS requires the target length of the matching TDS")
        y = self.conv(x)
        if not 2 * x.shape[-1] - 1 <= target_length <= y.shape[-1]:
            raise ValueError(f"cannot reach length {target_length} from {x.shape[-1]}")
        return y[..., :target_length]


# ---------------------------------------------------------------------- MCA


class FFN(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, x):
        return x + self.fc2(F.gelu(self.fc1(x)))


class RowSelfAttention(nn.Module):
    """Single-head residual self-attention with ROIs as tokens and time as features."""

    def __init__(self, dim: int):
        super().__init__()
        scale = 1.0 / math.sqrt(dim)
        self.wq = nn.Parameter(torch.randn(dim, dim) * scale)
        self.wk = nn.Parameter(torch.randn(dim, dim) * scale)
        self.wv = nn.Parameter(torch.randn(dim, dim) * scale)

    def forward(self, x):
        out, _ = multi_head_attention(x, self.wq, self.wk, self.wv, 1)
        return x + out


def cross_channel(e, x):
    """softmax(E X^T / sqrt(d)) E; returns the fused rows and the weights."""
    w = torch.softmax(e @ x.transpose(-1, -2) / math.sqrt(x.shape[-1]), dim=-1)
    return w @ e, w


class MCA(nn.Module):
    """Fuses the noisy sample with the rough conditioning sample.

    The attended noisy features and the rough sample are stacked as two
    channels before the per-ROI 1x3 convolution, so the rough sample's
    values (not only its similarity scores) reach the output.
    """

    def __init__(self, length: int):
        super().__init__()
        self.ffn_in = FFN(length)
        self.attn = RowSelfAttention(length)
        self.conv = nn.Conv2d(2, 1, (1, 3), padding=(0, 1))
        with torch.no_grad():
            # start as a pass-through of the rough sample
            self.conv.weight[0, 1, 0, 1] += 1.0
        self.ffn_out = FFN(length)
        self.last_weights: Optional[torch.Tensor] = None

    def forward(self, f_t, x):
        if f_t.shape != x.shape:
            raise ValueError(f"shape mismatch {tuple(f_t.shape)} vs {tuple(x.shape)}")
        e = self.attn(self.ffn_in(f_t))
        fused, w = cross_channel(e, x)
        self.last_weights = w.detach()
        h = self.conv(torch.stack([fused, x], dim=-3)).squeeze(-3)
        return self.ffn_out(h)


# --------------------------------------------------------------- estimator


def estimate_bec(f0_hat, ridge_lambda: float):
    """Lag-1 ridge regression of every ROI on all other ROIs.

    For target ROI i the coefficients solve
    ``min_w sum_tau (z_i(tau+1) - sum_{j!=i} w_j z_j(tau))^2 + lambda |w|^2``
    and ``A[j, i] = w_j``. All N systems are solved in one batched call so
    the result is differentiable in ``f0_hat``.

    Args:
        f0_hat: (N, d) or (B, N, d) tensor.
        ridge_lambda: positive ridge penalty.

    Returns:
        (N, N) or (B, N, N) tensor with an exactly zero diagonal.
    """
    squeeze = f0_hat.dim() == 2
    f = f0_hat.unsqueeze(0) if squeeze else f0_hat
    n = f.shape[-2]
    past, nxt = f[..., :-1], f[..., 1:]
    gram = past @ past.transpose(-1, -2)            # (B, N, N)
    cross = past @ nxt.transpose(-1, -2)            # cross[b, j, i] = sum z_j(tau) z_i(tau+1)
    eye = torch.eye(n, dtype=f.dtype, device=f.device)
    keep = 1.0 - eye                                # keep[i] masks out ROI i
    mask = keep[:, :, None] * keep[:, None, :]      # (N_target, N, N)
    systems = gram[:, None] * mask + ridge_lambda * eye
    rhs = cross.transpose(-1, -2) * keep            # (B, N_target, N)
    try:
        w = torch.linalg.solve(systems, rhs.unsqueeze(-1)).squeeze(-1)
    except RuntimeError as exc:
        raise BecError(f"BEC system is singular: {exc}") from exc
    if not torch.all(torch.isfinite(w)):
        raise BecError("BEC estimate is not finite; input series are degenerate")
    a = w.transpose(-1, -2) * keep
    return a.squeeze(0) if squeeze else a


# ---------------------------------------------------------------- generator


def timestep_embedding(t, dim: int):
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _block(cfg: GeneratorConfig, channels: int) -> nn.Module:
    if cfg.sete_as_conv:
        return ConvBlock(channels)
    return SeTeBlock(channels, cfg.heads, use_sma=not cfg.no_sma, use_tma=not cfg.no_tma)


class Generator(nn.Module):
    """G(F_t, X, t) -> (F0_hat, A).

    The encoder alternates TDS with SeTe blocks; the decoder mirrors it with
    TUS, additive skips and SeTe blocks. The decoder output is added to the
    MCA output to give F0_hat, and A is estimated from F0_hat.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.t_proj = nn.Linear(cfg.timestep_embed_dim, cfg.length)
        self.mca = MCA(cfg.length)
        if cfg.no_hierarchy:
            c = cfg.base_channels
            self.lift = nn.Conv2d(1, c, 1)
            self.block = _block(cfg, c)
            self.drop = nn.Conv2d(c, 1, 1)
            return
        self.tds = nn.ModuleList()
        self.enc = nn.ModuleList()
        self.tus = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(cfg.levels):
            c_in = 1 if i == 0 else cfg.channels(i - 1)
            c = cfg.channels(i)
            self.tds.append(TDS(c_in, c))
            self.enc.append(nn.Sequential(*[_block(cfg, c) for _ in range(cfg.blocks_per_level[i])]))
            self.tus.append(TUS(c, c_in))
            # decoder blocks run after the TUS that lands on level i - 1
            if i > 0:
                self.dec.append(nn.Sequential(
                    *[_block(cfg, c_in) for _ in range(cfg.blocks_per_level[i - 1])]))

    def decoder_parameters(self):
        if self.cfg.no_hierarchy:
            return list(self.drop.parameters())
        return list(self.tus.parameters()) + list(self.dec.parameters())

    def hierarchy(self, h):
        """Encoder/decoder on a (B, 1, N, d) tensor, returning (B, 1, N, d)."""
        if self.cfg.no_hierarchy:
            return self.drop(self.block(self.lift(h)))
        lengths = []
        skips = []
        for tds, enc in zip(self.tds, self.enc):
            lengths.append(h.shape[-1])
            h = enc(tds(h))
            skips.append(h)
        for i in reversed(range(self.cfg.levels)):
            h = self.tus[i](h, lengths[i])
            if i > 0:
                h = self.dec[i - 1](h + skips[i - 1])
        return h

    def forward(self, f_t, x, t):
        squeeze = f_t.dim() == 2
        if squeeze:
            f_t, x = f_t.unsqueeze(0), x.unsqueeze(0)
        emb = timestep_embedding(t, self.cfg.timestep_embed_dim).to(f_t.dtype)
        f_in = f_t + self.t_proj(emb)[:, None, :]
        f_mca = self.mca(f_in, x)
        f_tus = self.hierarchy(f_mca.unsqueeze(1)).squeeze(1)
        f0_hat = f_mca + f_tus
        a = estimate_bec(f0_hat, self.cfg.ridge_lambda)
        if squeeze:
            return f0_hat.squeeze(0), a.squeeze(0)
        return f0_hat, a
