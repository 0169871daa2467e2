"""Transformer feature reconstruction with neighbor-masked attention.

Tokens on a regular feature grid are reconstructed by an encoder-decoder
transformer. Attention is forbidden within a block of grid neighbors
centered on the query (the query itself included), so a token must be
rebuilt from non-local context; identity shortcuts stop working.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..backbone import FeatureExtractorSpec, TrainConfig, extract_features, train_loop
from ..errors import ConfigError
from .base import Detector, finish_training, register, slice_stream, to_tensor


def _default_extractor() -> FeatureExtractorSpec:
    return FeatureExtractorSpec(
        topology="efficientnet_b4",
        layer_names=("features.1", "features.2", "features.3", "features.4"),
    )


@dataclass
class UniadConfig:
    extractor: FeatureExtractorSpec = field(default_factory=_default_extractor)
    hidden_dim: int = 256
    heads: int = 8
    encoder_layers: int = 4
    decoder_layers: int = 4
    feedforward_dim: int = 1024
    jitter_scale: float = 20.0
    jitter_prob: float = 1.0
    neighbor_size: tuple[int, int] = (7, 7)
    pos_embedding: str = "learned"
    feature_grid: int = 14

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}"
            )
        if self.neighbor_size[0] % 2 == 0 or self.neighbor_size[1] % 2 == 0:
            raise ConfigError("neighbor_size entries must be odd")
        if self.pos_embedding != "learned":
            raise ConfigError(f"pos_embedding must be 'learned', got {self.pos_embedding!r}")
        if self.jitter_scale < 0 or not 0.0 <= self.jitter_prob <= 1.0:
            raise ConfigError("jitter_scale must be >= 0 and jitter_prob in [0,1]")


def build_neighbor_mask(grid_h: int, grid_w: int, neighbor_size: tuple[int, int]) -> torch.Tensor:
    """Boolean (N,N) mask; True forbids attention from query to key.

    The forbidden set of each query is the neighbor_size block centered on
    it (clipped at the grid border), which contains the query itself.
    """
    nh, nw = neighbor_size
    n = grid_h * grid_w
    mask = torch.zeros(n, n, dtype=torch.bool)
    for qi in range(grid_h):
        for qj in range(grid_w):
            q = qi * grid_w + qj
            for ki in range(max(0, qi - nh // 2), min(grid_h, qi + nh // 2 + 1)):
                for kj in range(max(0, qj - nw // 2), min(grid_w, qj + nw // 2 + 1)):
                    mask[q, ki * grid_w + kj] = True
    if bool(mask.all(dim=1).any()):
        raise ConfigError("neighbor_size leaves some query with no attendable token")
    return mask


def feature_jitter(tokens: torch.Tensor, scale: float, prob: float, seed: int) -> torch.Tensor:
    """Add norm-proportional Gaussian noise to (B,N,D) tokens, per-batch coin.

    Noise std per token is scale * ||token||_2 / D; with probability
    1 - prob the batch passes through unchanged. Deterministic per seed.
    """
    if scale == 0.0 or prob == 0.0:
        return tokens
    gen = torch.Generator().manual_seed(seed)
    if torch.rand((), generator=gen).item() >= prob:
        return tokens
    d = tokens.shape[-1]
    sigma = scale * tokens.norm(dim=-1, keepdim=True) / d
    noise = torch.randn(tokens.shape, generator=gen)
    return tokens + noise * sigma


class _MaskedLayer(nn.Module):
    def __init__(self, dim, heads, ffn_dim, cross: bool):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True) if cross else None
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.GELU(), nn.Linear(ffn_dim, dim))

    def forward(self, x, mask, memory=None):
        a, _ = self.self_attn(x, x, x, attn_mask=mask, need_weights=False)
        x = self.norm1(x + a)
        if self.cross_attn is not None and memory is not None:
            a, _ = self.cross_attn(x, memory, memory, attn_mask=mask, need_weights=False)
            x = self.norm2(x + a)
        return self.norm3(x + self.ffn(x))


class UniadModel(nn.Module):
    """Encoder-decoder over grid tokens; the decoder's queries are the
    learned position embeddings, fused with encoder memory by cross
    attention and with the previous layer's output by the residual path."""

    def __init__(self, in_dim: int, config: UniadConfig):
        super().__init__()
        c = config
        n = c.feature_grid * c.feature_grid
        self.input_proj = nn.Linear(in_dim, c.hidden_dim)
        self.pos = nn.Parameter(torch.zeros(1, n, c.hidden_dim))
        nn.init.normal_(self.pos, std=0.02)
        self.encoder = nn.ModuleList(
            _MaskedLayer(c.hidden_dim, c.heads, c.feedforward_dim, cross=False)
            for _ in range(c.encoder_layers)
        )
        self.decoder = nn.ModuleList(
            _MaskedLayer(c.hidden_dim, c.heads, c.feedforward_dim, cross=True)
            for _ in range(c.decoder_layers)
        )
        self.output_proj = nn.Linear(c.hidden_dim, in_dim)
        mask = build_neighbor_mask(c.feature_grid, c.feature_grid, c.neighbor_size)
        self.register_buffer("neighbor_mask", mask)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        x = self.input_proj(tokens) + self.pos
        for layer in self.encoder:
            x = layer(x, self.neighbor_mask)
        memory = x
        h = self.pos.expand(tokens.shape[0], -1, -1)
        for layer in self.decoder:
            h = layer(h, self.neighbor_mask, memory)
        return self.output_proj(h)


def slice_to_tokens(spec: FeatureExtractorSpec, slices: torch.Tensor, grid: int) -> torch.Tensor:
    """Stack the extractor layers on one grid and flatten to (B, N, C)."""
    feats = extract_features(spec, slices)
    resized = [
        F.interpolate(f, size=(grid, grid), mode="bilinear", align_corners=False)
        for f in feats.values()
    ]
    stacked = torch.cat(resized, dim=1)
    return stacked.flatten(2).transpose(1, 2)


def uniad_anomaly_map(model, slice2d: np.ndarray, config: UniadConfig) -> np.ndarray:
    """Per-token L2 reconstruction distance, upsampled to the slice size."""
    x = to_tensor(slice2d)
    model.eval()
    with torch.no_grad():
        tokens = slice_to_tokens(config.extractor, x, config.feature_grid)
        recon = model(tokens)
        dist = (recon - tokens).norm(dim=-1)
        g = config.feature_grid
        grid_map = dist.reshape(1, 1, g, g)
        out = F.interpolate(grid_map, size=x.shape[-2:], mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


@register
class UniadDetector(Detector):
    name = "uniad"

    def __init__(self, train: TrainConfig, config: UniadConfig | None = None):
        self.config = config if config is not None else UniadConfig()
        self.train_config = train
        self.model: UniadModel | None = None

    def _ensure_model(self, sample_slice: np.ndarray) -> None:
        if self.model is None:
            with torch.no_grad():
                tokens = slice_to_tokens(
                    self.config.extractor, to_tensor(sample_slice), self.config.feature_grid
                )
            self.model = UniadModel(tokens.shape[-1], self.config)

    def fit(self, train_slices, val_slices, seed: int) -> None:
        cfg = self.config
        self._ensure_model(np.asarray(train_slices)[0])
        rng = np.random.default_rng(seed)

        def loss_fn(model, batch):
            with torch.no_grad():
                tokens = slice_to_tokens(cfg.extractor, batch, cfg.feature_grid)
            jittered = feature_jitter(
                tokens, cfg.jitter_scale, cfg.jitter_prob, int(rng.integers(2**31 - 1))
            )
            recon = model(jittered)
            return torch.mean((recon - tokens) ** 2)

        def eval_loss(model, batch):
            # Selection mirrors inference: reconstruction without jitter.
            with torch.no_grad():
                tokens = slice_to_tokens(cfg.extractor, batch, cfg.feature_grid)
            return torch.mean((model(tokens) - tokens) ** 2)

        stream = slice_stream(train_slices, self.train_config.batch_size, seed)
        ckpts = train_loop(self.model, stream, loss_fn, self.train_config)
        chosen = finish_training(self.model, ckpts, val_slices, eval_loss)
        self.checkpoint_steps = tuple(c.step for c in ckpts)
        self.selected_step = chosen.step

    def score(self, slice2d: np.ndarray) -> np.ndarray:
        self._ensure_model(np.asarray(slice2d))
        return uniad_anomaly_map(self.model, slice2d, self.config)
