"""Differentiable similarity measures shared by the detectors.

SSIM stabilizers follow C1 = (0.01*L)^2, C2 = (0.03*L)^2 where L is the
joint dynamic range (max - min over both inputs) per channel, floored at a
tiny epsilon so identical inputs score exactly 1.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from ..errors import ConfigError

GMS_C = 0.0026  # gradient-magnitude stabilizer for intensities in [0,1]
RANGE_FLOOR = 1e-8

_PREWITT_X = torch.tensor([[1.0, 0.0, -1.0]] * 3) / 3.0


def _box_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    pad = window // 2
    return F.avg_pool2d(x, window, stride=1, padding=pad, count_include_pad=False)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int) -> torch.Tensor:
    """Per-pixel SSIM between (B,C,H,W) tensors using a uniform window."""
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if window % 2 != 1 or window < 1:
        raise ConfigError(f"window must be a positive odd integer, got {window}")
    joint_max = torch.maximum(
        a.amax(dim=(0, 2, 3)), b.amax(dim=(0, 2, 3))
    )
    joint_min = torch.minimum(
        a.amin(dim=(0, 2, 3)), b.amin(dim=(0, 2, 3))
    )
    dyn_range = (joint_max - joint_min).clamp_min(RANGE_FLOOR)[None, :, None, None]
    c1 = (0.01 * dyn_range) ** 2
    c2 = (0.03 * dyn_range) ** 2

    mu_a = _box_mean(a, window)
    mu_b = _box_mean(b, window)
    var_a = _box_mean(a * a, window) - mu_a * mu_a
    var_b = _box_mean(b * b, window) - mu_b * mu_b
    cov = _box_mean(a * b, window) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def gradient_magnitude(x: torch.Tensor) -> torch.Tensor:
    """Prewitt gradient magnitude with a guarded square root."""
    kx = _PREWITT_X.to(x.dtype).to(x.device)[None, None]
    ky = kx.transpose(-1, -2)
    c = x.shape[1]
    gx = F.conv2d(x, kx.expand(c, 1, 3, 3), padding=1, groups=c)
    gy = F.conv2d(x, ky.expand(c, 1, 3, 3), padding=1, groups=c)
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def gms_map(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Gradient magnitude similarity per pixel, bounded in (0, 1]."""
    ga = gradient_magnitude(a)
    gb = gradient_magnitude(b)
    return (2 * ga * gb + GMS_C) / (ga * ga + gb * gb + GMS_C)


def msgms_map(a: torch.Tensor, b: torch.Tensor, scales: int) -> torch.Tensor:
    """Multi-scale GMS: per-scale maps upsampled to full size and averaged."""
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if scales < 1:
        raise ConfigError(f"scales must be >= 1, got {scales}")
    size = a.shape[-2:]
    total = torch.zeros_like(a)
    xa, xb = a, b
    for s in range(scales):
        if s > 0:
            xa = F.avg_pool2d(xa, 2)
            xb = F.avg_pool2d(xb, 2)
        g = gms_map(xa, xb)
        if g.shape[-2:] != size:
            g = F.interpolate(g, size=size, mode="bilinear", align_corners=False)
        total = total + g
    return total / scales
