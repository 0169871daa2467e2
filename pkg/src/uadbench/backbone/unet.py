"""Configurable DDPM++-style U-Net shared by the reconstruction detectors.

Deviations from the stock DDPM++ follow the efficient-U-Net recipe:
downsampling happens before the first convolution of a level (and
upsampling after the last), residual branches may be rescaled by 1/sqrt(2),
and the last convolution of every block plus the output head start at zero
so an untrained network maps any input to exactly zero.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from ..errors import ConfigError

TIME_EMBED_MULT = 4  # hidden width of the timestep MLP relative to base_dim


@dataclass
class UNetConfig:
    image_size: int
    input_channels: int = 1
    base_dim: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    blocks_per_resolution: tuple[int, ...] = (1, 1, 1)
    attention_resolutions: tuple[int, ...] = ()
    attention_embed_dim: int = 32
    dropout: float = 0.0
    dropout_start_resolution: int = 1
    normalization: str = "group"
    rescale_residual: bool = False
    time_conditioning: bool = False

    def __post_init__(self):
        if self.image_size <= 0 or self.input_channels <= 0 or self.base_dim <= 0:
            raise ConfigError("image_size, input_channels and base_dim must be positive")
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.blocks_per_resolution = tuple(int(b) for b in self.blocks_per_resolution)
        self.attention_resolutions = tuple(int(r) for r in self.attention_resolutions)
        if len(self.channel_multipliers) != len(self.blocks_per_resolution):
            raise ConfigError(
                f"{len(self.channel_multipliers)} channel multipliers but "
                f"{len(self.blocks_per_resolution)} block counts"
            )
        if any(m <= 0 for m in self.channel_multipliers) or any(
            b <= 0 for b in self.blocks_per_resolution
        ):
            raise ConfigError("channel multipliers and block counts must be positive")
        levels = len(self.channel_multipliers)
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1}"
            )
        reachable = tuple(self.image_size // 2**i for i in range(levels))
        missing = [r for r in self.attention_resolutions if r not in reachable]
        if missing:
            raise ConfigError(
                f"attention resolutions {missing} unreachable; reachable: {list(reachable)}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0,1), got {self.dropout}")
        if self.dropout_start_resolution <= 0:
            raise ConfigError("dropout_start_resolution must be positive")
        if self.attention_embed_dim <= 0:
            raise ConfigError("attention_embed_dim must be positive")
        if self.normalization not in ("group", "batch"):
            raise ConfigError(f"normalization must be group|batch, got {self.normalization!r}")

    @property
    def level_resolutions(self) -> tuple[int, ...]:
        return tuple(self.image_size // 2**i for i in range(len(self.channel_multipliers)))

    def fingerprint(self) -> str:
        payload = asdict(self)
        payload["time_embed_width"] = TIME_EMBED_MULT * self.base_dim
        blob = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _group_count(channels: int) -> int:
    for g in (32, 16, 8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "group":
        return nn.GroupNorm(_group_count(channels), channels)
    return nn.BatchNorm2d(channels)


def _zero_init(conv: nn.Module) -> nn.Module:
    nn.init.zeros_(conv.weight)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)
    return conv


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / max(half - 1, 1)
        )
        args = t.float()[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
        if self.dim % 2 == 1:
            emb = F.pad(emb, (0, 1))
        return emb


class ResidualBlock(nn.Module):
    """BigGAN-style residual block; last convolution starts at zero."""

    def __init__(self, in_ch, out_ch, norm, dropout, time_dim, rescale):
        super().__init__()
        self.norm1 = _make_norm(norm, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch) if time_dim else None
        self.norm2 = _make_norm(norm, out_ch)
        self.dropout = nn.Dropout(dropout) if dropout > 0 else nn.Identity()
        self.conv2 = _zero_init(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.scale = 1.0 / math.sqrt(2.0) if rescale else 1.0

    def forward(self, x, t_emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time_proj is not None and t_emb is not None:
            h = h + self.time_proj(t_emb)[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return (self.shortcut(x) + h) * self.scale


class AttentionBlock(nn.Module):
    """Spatial self-attention; the output projection starts at zero."""

    def __init__(self, channels, embed_dim, norm, rescale):
        super().__init__()
        self.heads = max(1, channels // embed_dim)
        inner = self.heads * embed_dim
        self.norm = _make_norm(norm, channels)
        self.qkv = nn.Conv2d(channels, 3 * inner, 1)
        self.proj = _zero_init(nn.Conv2d(inner, channels, 1))
        self.head_dim = embed_dim
        self.scale = 1.0 / math.sqrt(2.0) if rescale else 1.0

    def forward(self, x):
        b, _, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv.chunk(3, dim=1)

        def split(z):
            return z.reshape(b, self.heads, self.head_dim, h * w).transpose(2, 3)

        out = F.scaled_dot_product_attention(split(q), split(k), split(v))
        out = out.transpose(2, 3).reshape(b, self.heads * self.head_dim, h, w)
        return (x + self.proj(out)) * self.scale


class Downsample(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        c = config
        chans = [c.base_dim * m for m in c.channel_multipliers]
        levels = len(chans)
        res = c.level_resolutions
        time_dim = TIME_EMBED_MULT * c.base_dim if c.time_conditioning else 0
        if c.time_conditioning:
            self.time_embed = nn.Sequential(
                SinusoidalTimeEmbedding(c.base_dim),
                nn.Linear(c.base_dim, time_dim),
                nn.SiLU(),
                nn.Linear(time_dim, time_dim),
            )
        else:
            self.time_embed = None

        def block(in_ch, out_ch, level):
            dropout = c.dropout if res[level] <= c.dropout_start_resolution else 0.0
            return ResidualBlock(in_ch, out_ch, c.normalization, dropout, time_dim, c.rescale_residual)

        def attn(channels):
            return AttentionBlock(channels, c.attention_embed_dim, c.normalization, c.rescale_residual)

        self.stem = nn.Conv2d(c.input_channels, c.base_dim, 3, padding=1)

        # Encoder: downsample first (efficient ordering), then the level's blocks.
        self.down_samplers = nn.ModuleList()
        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        prev = c.base_dim
        for i in range(levels):
            self.down_samplers.append(Downsample(prev) if i > 0 else nn.Identity())
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for j in range(c.blocks_per_resolution[i]):
                blocks.append(block(prev if j == 0 else chans[i], chans[i], i))
                attns.append(attn(chans[i]) if res[i] in c.attention_resolutions else nn.Identity())
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            prev = chans[i]

        self.mid_block1 = block(chans[-1], chans[-1], levels - 1)
        self.mid_attn = attn(chans[-1]) if res[-1] in c.attention_resolutions else nn.Identity()
        self.mid_block2 = block(chans[-1], chans[-1], levels - 1)

        # Decoder: blocks first, upsample last, per-level skip concatenation.
        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.up_samplers = nn.ModuleList()
        for i in reversed(range(levels)):
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for j in range(c.blocks_per_resolution[i]):
                in_ch = chans[i] * 2 if j == 0 else chans[i]
                blocks.append(block(in_ch, chans[i], i))
                attns.append(attn(chans[i]) if res[i] in c.attention_resolutions else nn.Identity())
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            self.up_samplers.append(Upsample(chans[i], chans[i - 1]) if i > 0 else nn.Identity())

        self.head_norm = _make_norm(c.normalization, chans[0])
        self.head = _zero_init(nn.Conv2d(chans[0], c.input_channels, 3, padding=1))

    def forward(self, x: torch.Tensor, t: torch.Tensor | None = None) -> torch.Tensor:
        if self.time_embed is not None:
            if t is None:
                raise ConfigError("time-conditioned network called without timesteps")
            t_emb = self.time_embed(t)
        else:
            t_emb = None

        h = self.stem(x)
        skips = []
        for sampler, blocks, attns in zip(self.down_samplers, self.down_blocks, self.down_attns):
            h = sampler(h)
            for blk, att in zip(blocks, attns):
                h = att(blk(h, t_emb))
            skips.append(h)

        h = self.mid_block1(h, t_emb)
        h = self.mid_attn(h)
        h = self.mid_block2(h, t_emb)

        for blocks, attns, sampler in zip(self.up_blocks, self.up_attns, self.up_samplers):
            h = torch.cat([h, skips.pop()], dim=1)
            for blk, att in zip(blocks, attns):
                h = att(blk(h, t_emb))
            h = sampler(h)

        return self.head(F.silu(self.head_norm(h)))


def build_unet(config: UNetConfig) -> UNet:
    """Instantiate the U-Net; raises a config error for unreachable attention."""
    return UNet(config)
