"""Disentangled synthetic-anomaly generation.

Shape, texture and intensity attributes are sampled independently: a soft
2D mask from procedurally generated primitives, foreign-patch texture
interpolation, and a tissue-conditioned intensity bias. A corruption
schedule scales the anomaly strength with a timestep so restoration models
can be trained on (corrupted, clean) pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .errors import ConfigError, ZeroVarianceWarning

SHAPE_KINDS = ("rectangle", "ellipse", "blend")

# Uniform sampling ranges for the anomaly attributes; the source work does
# not publish these, so they are config values, not reproduction targets.
ALPHA_RANGE = (0.2, 1.0)
BIAS_RANGE = (-0.5, 0.5)

_MASK_RETRIES = 20


@dataclass
class TissueClusters:
    """Sorted 1D k-means centroids of brain-voxel intensities."""

    centroids: tuple[float, ...]
    modality: str

    def __post_init__(self):
        self.centroids = tuple(float(c) for c in self.centroids)
        if not self.centroids:
            raise ConfigError("centroids must be nonempty")
        if list(self.centroids) != sorted(self.centroids):
            raise ConfigError("centroids must be sorted ascending")

    def assign(self, values: np.ndarray) -> np.ndarray:
        """Index of the nearest centroid per element."""
        c = np.asarray(self.centroids)
        return np.argmin(np.abs(np.asarray(values)[..., None] - c), axis=-1)


@dataclass
class AnomalySample:
    mask: np.ndarray
    alpha: float
    bias: float
    tissue_index: int
    shape_kind: str

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.ndim != 2:
            raise ConfigError("anomaly mask must be 2D")
        if self.mask.min() < 0 or self.mask.max() > 1:
            raise ConfigError("anomaly mask values must lie in [0,1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.shape_kind not in SHAPE_KINDS:
            raise ConfigError(f"shape_kind must be one of {SHAPE_KINDS}")


def fit_tissue_clusters(volumes, k: int, seed: int, modality: str = "T1w", max_voxels: int = 200_000) -> TissueClusters:
    """1D Lloyd k-means over brain-voxel intensities of the training sample.

    Deterministic per seed; centroids are returned sorted. The per-iteration
    objective is asserted non-increasing. Raises when the data has fewer
    distinct intensities than k.
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    parts = []
    for vol in volumes:
        parts.append(vol.voxels[vol.brain_mask].astype(np.float64).ravel())
    if not parts:
        raise ConfigError("no volumes provided")
    data = np.concatenate(parts)
    rng = np.random.default_rng(seed)
    if data.size > max_voxels:
        data = rng.choice(data, size=max_voxels, replace=False)
    distinct = np.unique(data)
    if distinct.size < k:
        raise ConfigError(f"only {distinct.size} distinct intensities for k={k}")

    centroids = np.sort(rng.choice(distinct, size=k, replace=False))
    prev_obj = np.inf
    for _ in range(100):
        assign = np.argmin(np.abs(data[:, None] - centroids[None, :]), axis=1)
        obj = float(np.sum((data - centroids[assign]) ** 2))
        assert obj <= prev_obj + 1e-9, "k-means objective increased"
        if prev_obj - obj < 1e-12:
            break
        prev_obj = obj
        for j in range(k):
            sel = assign == j
            if sel.any():
                centroids[j] = data[sel].mean()
        centroids = np.sort(centroids)
    return TissueClusters(centroids=tuple(centroids.tolist()), modality=modality)


def _rasterize(kind, patch_size, center, half_sizes, angle, rng):
    ys, xs = np.mgrid[0:patch_size, 0:patch_size].astype(np.float64)
    ys -= center[0]
    xs -= center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * ys + sa * xs
    v = -sa * ys + ca * xs
    if kind == "rectangle":
        return ((np.abs(u) <= half_sizes[0]) & (np.abs(v) <= half_sizes[1])).astype(np.float64)
    if kind == "ellipse":
        return ((u / half_sizes[0]) ** 2 + (v / half_sizes[1]) ** 2 <= 1.0).astype(np.float64)
    w = rng.uniform(0.25, 0.75)
    rect = _rasterize("rectangle", patch_size, center, half_sizes, angle, rng)
    ell = _rasterize("ellipse", patch_size, center, half_sizes, angle, rng)
    return w * rect + (1 - w) * ell


def sample_anomaly_mask(
    patch_size: int,
    seed: int,
    smooth_sigma: float | None = None,
    shape_kind: str | None = None,
    axis_aligned: bool = False,
) -> np.ndarray:
    """Sample a soft anomaly mask from a randomly transformed 2D primitive.

    A rectangle, ellipse or convex blend of both is placed with a random
    rotation and extent, then Gaussian-smoothed. Values lie in [0,1] and the
    result is deterministic per seed. Degenerate placements (empty support)
    are re-sampled a bounded number of times, falling back to a centered
    rectangle.
    """
    if patch_size < 8:
        raise ConfigError(f"patch_size must be >= 8, got {patch_size}")
    rng = np.random.default_rng(seed)
    kind = shape_kind if shape_kind is not None else rng.choice(SHAPE_KINDS)
    if kind not in SHAPE_KINDS:
        raise ConfigError(f"shape_kind must be one of {SHAPE_KINDS}")
    sigma = smooth_sigma if smooth_sigma is not None else rng.uniform(0.5, 2.0)

    mask = None
    for _ in range(_MASK_RETRIES):
        center = rng.uniform(patch_size * 0.25, patch_size * 0.75, size=2)
        half_sizes = rng.uniform(patch_size / 8, patch_size / 3, size=2)
        angle = 0.0 if axis_aligned else rng.uniform(0, np.pi)
        cand = _rasterize(kind, patch_size, center, half_sizes, angle, rng)
        if cand.max() > 0:
            mask = cand
            break
    if mask is None:
        c = patch_size / 2.0
        mask = _rasterize("rectangle", patch_size, (c, c), (patch_size / 4, patch_size / 4), 0.0, rng)
    if sigma > 0:
        mask = gaussian_filter(mask, sigma)
    return np.clip(mask, 0.0, 1.0)


def fpi_blend(target: np.ndarray, source: np.ndarray, alpha: float, mask: np.ndarray) -> np.ndarray:
    """Foreign-patch interpolation of a normalized source into the target.

    out = (1 - alpha*mask) * target + alpha*mask * n(source), where n
    rescales the source to the target's mean/std inside the mask support.
    A zero-variance source falls back to mean matching and emits a warning.
    """
    target = np.asarray(target, dtype=np.float64)
    source = np.asarray(source, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not target.shape == source.shape == mask.shape:
        raise ConfigError(
            f"shape mismatch: target {target.shape}, source {source.shape}, mask {mask.shape}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0,1], got {alpha}")
    support = mask > 0
    if not support.any() or alpha == 0.0:
        return target.copy()
    mu_t = target[support].mean()
    sd_t = target[support].std()
    mu_s = source[support].mean()
    sd_s = source[support].std()
    if sd_s < 1e-12:
        warnings.warn(
            "zero-variance source inside mask support; matching means only",
            ZeroVarianceWarning,
            stacklevel=2,
        )
        normalized = source - mu_s + mu_t
    else:
        normalized = (source - mu_s) / sd_s * sd_t + mu_t
    return (1.0 - alpha * mask) * target + alpha * mask * normalized


def apply_intensity_bias(
    patch: np.ndarray,
    mask: np.ndarray,
    clusters: TissueClusters,
    tissue_index: int,
    bias: float,
) -> np.ndarray:
    """Shift masked voxels of one tissue class by bias*mask, clipped to [0,1]."""
    patch = np.asarray(patch, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not 0 <= tissue_index < len(clusters.centroids):
        raise ConfigError(
            f"tissue_index {tissue_index} out of range for {len(clusters.centroids)} clusters"
        )
    sel = (clusters.assign(patch) == tissue_index) & (mask > 0)
    out = patch.copy()
    out[sel] = np.clip(patch[sel] + bias * mask[sel], 0.0, 1.0)
    return out


def disyre_augment(slice2d: np.ndarray, seed: int) -> np.ndarray:
    """Elastic, intensity and mirror augmentations applied before corruption."""
    rng = np.random.default_rng(seed)
    out = np.asarray(slice2d, dtype=np.float64)
    if rng.random() < 0.5:
        out = out[:, ::-1]
    gamma = rng.uniform(0.8, 1.25)
    out = np.clip(out, 0.0, 1.0) ** gamma
    # Smooth random displacement field, a few pixels at most.
    h, w = out.shape
    amp = rng.uniform(0.0, 2.0)
    dy = gaussian_filter(rng.standard_normal((h, w)), 8.0) * amp * 8.0
    dx = gaussian_filter(rng.standard_normal((h, w)), 8.0) * amp * 8.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = map_coordinates(out, [ys + dy, xs + dx], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


def disyre_corrupt(
    slice2d: np.ndarray,
    t: int,
    T: int,
    anomaly: AnomalySample,
    seed: int,
    clusters: TissueClusters | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a slice with strength t/T; returns (corrupted, clean target).

    The effective interpolation factor and bias scale linearly from 0 at
    t=0 to the sampled values at t=T, so t=0 reproduces the input exactly.
    The texture source is the slice itself under a seed-determined shift.
    """
    if not 0 <= t <= T or T <= 0:
        raise ConfigError(f"need 0 <= t <= T with T > 0, got t={t}, T={T}")
    target = np.asarray(slice2d, dtype=np.float64)
    if target.shape != anomaly.mask.shape:
        raise ConfigError(f"slice {target.shape} vs mask {anomaly.mask.shape}")
    strength = t / T
    rng = np.random.default_rng(seed)
    shift = rng.integers(1, max(2, min(target.shape)), size=2)
    source = np.roll(target, tuple(shift), axis=(0, 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroVarianceWarning)
        corrupted = fpi_blend(target, source, strength * anomaly.alpha, anomaly.mask)
    if clusters is not None:
        corrupted = apply_intensity_bias(
            corrupted, anomaly.mask, clusters, anomaly.tissue_index, strength * anomaly.bias
        )
    else:
        soft = anomaly.mask * strength * anomaly.bias
        corrupted = corrupted + soft
    return np.clip(corrupted, 0.0, 1.0), target


def sample_anomaly(patch_size: int, seed: int, n_tissues: int) -> AnomalySample:
    """Draw mask, alpha, bias and tissue index for one synthetic anomaly."""
    rng = np.random.default_rng(seed)
    kind = str(rng.choice(SHAPE_KINDS))
    mask = sample_anomaly_mask(patch_size, seed=int(rng.integers(2**31 - 1)), shape_kind=kind)
    return AnomalySample(
        mask=mask,
        alpha=float(rng.uniform(*ALPHA_RANGE)),
        bias=float(rng.uniform(*BIAS_RANGE)),
        tissue_index=int(rng.integers(n_tissues)),
        shape_kind=kind,
    )
