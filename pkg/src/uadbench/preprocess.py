"""Intensity normalization, axial slicing, cropping and reassembly.

All functions are pure and deterministic. Slicing runs along axis 0 of the
voxel grid; the stack records enough bookkeeping (kept indices, crop offset,
original shape) to place per-slice anomaly maps back into volume space.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateRangeWarning
from .data.volume import Volume


@dataclass
class SliceStack:
    """Axial slices plus the bookkeeping needed to invert the slicing."""

    slices: list[np.ndarray]
    source_indices: list[int]
    crop_offset: tuple[int, int]
    original_shape: tuple[int, int, int]
    downsample: int = 1

    def __post_init__(self):
        if len(self.slices) != len(self.source_indices):
            raise ConfigError(
                f"{len(self.slices)} slices but {len(self.source_indices)} source indices"
            )
        if self.downsample < 1:
            raise ConfigError(f"downsample must be >= 1, got {self.downsample}")
        shapes = {s.shape for s in self.slices}
        if len(shapes) > 1:
            raise ConfigError(f"slices have mixed shapes: {sorted(shapes)}")
        idx = list(self.source_indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ConfigError(f"source_indices must be strictly increasing, got {idx}")
        if len(self.crop_offset) != 2 or any(o < 0 for o in self.crop_offset):
            raise ConfigError(f"crop_offset must be 2 nonnegative ints, got {self.crop_offset}")
        if len(self.original_shape) != 3:
            raise ConfigError(f"original_shape must have 3 entries, got {self.original_shape}")

    def __len__(self) -> int:
        return len(self.slices)

    def as_array(self) -> np.ndarray:
        """Kept slices stacked along a new leading axis."""
        if not self.slices:
            return np.zeros((0, 0, 0), dtype=np.float32)
        return np.stack(self.slices, axis=0)


def minmax_normalize(volume: Volume) -> Volume:
    """Affinely map the volume's intensity range onto [0, 1].

    The min and max are taken over every voxel, background included. A
    constant volume maps to all zeros and raises a degenerate-range warning
    instead of an error so batch jobs survive blank scans.
    """
    v = volume.voxels.astype(np.float64)
    lo = float(v.min())
    hi = float(v.max())
    if hi == lo:
        warnings.warn(
            f"constant volume (value {lo}); normalized output is all zeros",
            DegenerateRangeWarning,
            stacklevel=2,
        )
        out = np.zeros_like(v)
    else:
        out = (v - lo) / (hi - lo)
    return Volume(
        voxels=out.astype(np.float32),
        spacing_mm=volume.spacing_mm,
        modality=volume.modality,
        brain_mask=volume.brain_mask,
    )


def volume_to_slices(volume: Volume, crop: tuple[int, int], downsample: int = 1) -> SliceStack:
    """Extract axial slices, drop all-zero ones, center-crop the rest.

    Centering ties (odd margin) resolve toward the low index. An input whose
    slices are all zero yields an empty stack plus a warning. With
    ``downsample`` > 1 each cropped slice is average-pooled by that factor,
    trading in-plane resolution for compute; reassembly undoes it.
    """
    d0, h, w = volume.shape
    ch, cw = int(crop[0]), int(crop[1])
    if ch > h or cw > w or ch <= 0 or cw <= 0:
        raise ConfigError(f"crop {crop} does not fit slice shape {(h, w)}")
    f = int(downsample)
    if f < 1:
        raise ConfigError(f"downsample must be >= 1, got {downsample}")
    if ch % f or cw % f:
        raise ConfigError(f"crop {crop} not divisible by downsample factor {f}")
    off = ((h - ch) // 2, (w - cw) // 2)
    slices = []
    kept = []
    for i in range(d0):
        plane = volume.voxels[i]
        if not plane.any():
            continue
        cropped = plane[off[0] : off[0] + ch, off[1] : off[1] + cw]
        if f > 1:
            cropped = cropped.reshape(ch // f, f, cw // f, f).mean(axis=(1, 3))
        slices.append(cropped.astype(np.float32, copy=True))
        kept.append(i)
    if not slices:
        warnings.warn(
            "every axial slice is zero; returning an empty stack",
            DegenerateRangeWarning,
            stacklevel=2,
        )
    return SliceStack(
        slices=slices,
        source_indices=kept,
        crop_offset=off,
        original_shape=volume.shape,
        downsample=f,
    )


def rescale_range(stack: SliceStack, target: tuple[float, float]) -> SliceStack:
    """Affine remap of [0, 1] slice values onto [target_low, target_high]."""
    lo, hi = float(target[0]), float(target[1])
    if lo >= hi:
        raise ConfigError(f"target range must satisfy low < high, got {(lo, hi)}")
    scale = hi - lo
    return SliceStack(
        slices=[s * scale + lo for s in stack.slices],
        source_indices=list(stack.source_indices),
        crop_offset=stack.crop_offset,
        original_shape=stack.original_shape,
        downsample=stack.downsample,
    )


def reassemble_anomaly_volume(maps: list[np.ndarray], stack: SliceStack) -> np.ndarray:
    """Place per-slice anomaly maps back into the original volume frame.

    Dropped slices and crop margins are filled with 0, so everything outside
    the modeled field of view reads as "no anomaly". Downsampled slices are
    brought back to crop size by nearest-neighbor upsampling.
    """
    if len(maps) != len(stack.slices):
        raise ConfigError(f"{len(maps)} maps for {len(stack.slices)} slices")
    out = np.zeros(stack.original_shape, dtype=np.float32)
    r0, c0 = stack.crop_offset
    f = stack.downsample
    for k, (m, idx) in enumerate(zip(maps, stack.source_indices)):
        m = np.asarray(m)
        if stack.slices and m.shape != stack.slices[k].shape:
            raise ConfigError(
                f"map {k} (axial index {idx}) has shape {m.shape}, expected {stack.slices[k].shape}"
            )
        if f > 1:
            m = m.repeat(f, axis=0).repeat(f, axis=1)
        out[idx, r0 : r0 + m.shape[0], c0 : c0 + m.shape[1]] = m
    return out
