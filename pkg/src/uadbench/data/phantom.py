"""Deterministic synthetic phantom volumes.

The phantom is a centered ellipsoid brain made of concentric tissue shells
with additive Gaussian noise; lesions are spheres that add a signed
contrast offset on top of the local tissue value. Background voxels are
exactly zero so the preprocessing zero-slice rule is exercised for real.

Every volume carries a small fiducial cube of intensity 1.0 outside the
brain, like the calibration markers taped to head coils: it anchors the
volume maximum so per-volume min-max normalization maps tissue bands to
the same values whether or not a lesion is present. Without it, lesioned
volumes (max driven by the lesion) and healthy volumes (max driven by
tissue) would normalize onto different intensity scales.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, PlacementError
from .uvol import write_volume
from .volume import DatasetManifest, LesionMask, ManifestEntry, SubjectRecord, Volume

# Fraction of each grid dimension covered by the brain ellipsoid semi-axis.
BRAIN_SEMI_AXIS_FRACTION = 0.42

MAX_PLACEMENT_ATTEMPTS = 200

FIDUCIAL_VALUE = 1.0
FIDUCIAL_SIZE = 2


@dataclass
class PhantomSpec:
    grid_shape: tuple[int, int, int]
    tissue_levels: tuple[float, ...]
    lesion_count: int
    lesion_radius_range: tuple[float, float]
    lesion_contrast: float
    noise_std: float
    seed: int

    def __post_init__(self):
        if len(self.grid_shape) != 3 or any(int(d) <= 0 for d in self.grid_shape):
            raise ConfigError(f"grid_shape must be 3 positive ints, got {self.grid_shape}")
        self.grid_shape = tuple(int(d) for d in self.grid_shape)
        if len(self.tissue_levels) == 0:
            raise ConfigError("tissue_levels must be nonempty")
        if any(not 0.0 <= t <= 1.0 for t in self.tissue_levels):
            raise ConfigError(f"tissue_levels must lie in [0,1], got {self.tissue_levels}")
        self.tissue_levels = tuple(float(t) for t in self.tissue_levels)
        if self.lesion_count < 0:
            raise ConfigError("lesion_count must be nonnegative")
        lo, hi = self.lesion_radius_range
        if not (0 < lo <= hi):
            raise ConfigError(f"lesion_radius_range must satisfy 0 < min <= max, got {(lo, hi)}")
        self.lesion_radius_range = (float(lo), float(hi))
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")


def _ellipsoid_radius(shape: tuple[int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Normalized ellipsoid radius per voxel and the brain mask (radius <= 1)."""
    center = [(d - 1) / 2.0 for d in shape]
    semi = [BRAIN_SEMI_AXIS_FRACTION * d for d in shape]
    grids = np.meshgrid(*[np.arange(d, dtype=np.float64) for d in shape], indexing="ij")
    rho = np.sqrt(sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi)))
    return rho, rho <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LesionMask, SubjectRecord]:
    """Build one phantom volume with its lesion mask and a subject record.

    Deterministic for a fixed spec (seed included). Lesion voxels carry the
    local tissue value plus ``lesion_contrast``, clipped to [0,1]; the lesion
    mask is always contained in the brain mask.
    """
    rng = np.random.default_rng(spec.seed)
    rho, brain = _ellipsoid_radius(spec.grid_shape)

    # Concentric shells: band 0 is innermost; per-band base intensity.
    k = len(spec.tissue_levels)
    band = np.minimum((rho * k).astype(np.int64), k - 1)
    levels = np.asarray(spec.tissue_levels, dtype=np.float64)
    tissue = np.where(brain, levels[band], 0.0)
    if spec.noise_std > 0:
        noise = rng.normal(0.0, spec.noise_std, size=spec.grid_shape)
        tissue = np.where(brain, tissue + noise, 0.0)
    tissue = np.clip(tissue, 0.0, 1.0)

    lesion_mask = np.zeros(spec.grid_shape, dtype=bool)
    brain_idx = np.argwhere(brain)
    for _ in range(spec.lesion_count):
        radius = rng.uniform(*spec.lesion_radius_range)
        placed = False
        for attempt in range(1, MAX_PLACEMENT_ATTEMPTS + 1):
            center = brain_idx[rng.integers(len(brain_idx))]
            ball = _ball_voxels(center, radius, spec.grid_shape)
            if ball is not None and brain[tuple(ball.T)].all():
                lesion_mask[tuple(ball.T)] = True
                placed = True
                break
        if not placed:
            raise PlacementError(attempt)

    voxels = np.where(lesion_mask, np.clip(tissue + spec.lesion_contrast, 0.0, 1.0), tissue)
    voxels = _place_fiducial(voxels, brain)
    volume = Volume(
        voxels=voxels.astype(np.float32),
        spacing_mm=(1.0, 1.0, 1.0),
        modality="synthetic",
        brain_mask=brain,
    )
    subject = SubjectRecord(
        subject_id=f"phantom-{spec.seed:08d}",
        age=float(20.0 + 60.0 * rng.random()),
        sex="male" if rng.random() < 0.5 else "female",
        scanner_id="synthetic-1",
        cohort="synthetic",
        split="train",
    )
    return volume, LesionMask(mask=lesion_mask), subject


def _place_fiducial(voxels: np.ndarray, brain: np.ndarray) -> np.ndarray:
    """Stamp the calibration cube into an in-plane corner at the central slice.

    Skipped when the grid is too small to hold it clear of the brain, so
    toy volumes in unit tests stay valid.
    """
    gz, gy, gx = voxels.shape
    s = FIDUCIAL_SIZE
    z0 = gz // 2 - s // 2
    region = (slice(z0, z0 + s), slice(2, 2 + s), slice(2, 2 + s))
    if z0 < 0 or gy < 2 + s or gx < 2 + s or brain[region].any():
        return voxels
    voxels = voxels.copy()
    voxels[region] = FIDUCIAL_VALUE
    return voxels


def _ball_voxels(center: np.ndarray, radius: float, shape: tuple[int, int, int]) -> np.ndarray | None:
    """Integer voxels within Euclidean ``radius`` of ``center``; None if clipped."""
    r = int(np.floor(radius))
    lo = center - r
    hi = center + r
    if (lo < 0).any() or (hi >= np.asarray(shape)).any():
        return None
    offs = np.arange(-r, r + 1)
    oz, oy, ox = np.meshgrid(offs, offs, offs, indexing="ij")
    keep = oz**2 + oy**2 + ox**2 <= radius**2
    pts = np.stack([oz[keep], oy[keep], ox[keep]], axis=1) + center
    return pts


@dataclass
class CohortSpec:
    """Seeded phantom cohort: healthy training plus lesioned val/test splits."""

    n_train: int
    n_validation: int
    n_test: int
    grid_shape: tuple[int, int, int] = (64, 64, 64)
    # Inner to outer band values; +0.3 lesions land at 0.9/0.7/0.5, each
    # several noise sigmas away from every healthy band and below the
    # fiducial ceiling, so hyperintensity is never clipped away.
    tissue_levels: tuple[float, ...] = (0.6, 0.4, 0.2)
    lesion_count: int = 1
    lesion_radius_range: tuple[float, float] = (4.0, 8.0)
    lesion_contrast: float = 0.3
    noise_std: float = 0.02
    seed: int = 0
    # When set, test subjects cycle through these fixed radii (size-effect runs).
    test_radius_cycle: tuple[float, ...] | None = None
    n_test_healthy: int = 0


def write_cohort(spec: CohortSpec, out_dir: str | Path) -> dict[str, Path]:
    """Generate a cohort on disk and return the per-split manifest paths.

    Training subjects are lesion-free; validation and test subjects carry
    lesions. Optional extra lesion-free test subjects support false positive
    rate evaluation. Deterministic for a fixed spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    roster = (
        [("train", i, False) for i in range(spec.n_train)]
        + [("validation", i, True) for i in range(spec.n_validation)]
        + [("test", i, True) for i in range(spec.n_test)]
        + [("test", spec.n_test + i, False) for i in range(spec.n_test_healthy)]
    )
    entries: dict[str, list[ManifestEntry]] = {"train": [], "validation": [], "test": []}
    test_rank = 0
    for split, idx, lesioned in roster:
        subject_seed = int(rng.integers(0, 2**31 - 1))
        radius_range = spec.lesion_radius_range
        if lesioned and split == "test" and spec.test_radius_cycle:
            r = spec.test_radius_cycle[test_rank % len(spec.test_radius_cycle)]
            radius_range = (r, r)
            test_rank += 1
        subj_spec = PhantomSpec(
            grid_shape=spec.grid_shape,
            tissue_levels=spec.tissue_levels,
            lesion_count=spec.lesion_count if lesioned else 0,
            lesion_radius_range=radius_range,
            lesion_contrast=spec.lesion_contrast,
            noise_std=spec.noise_std,
            seed=subject_seed,
        )
        volume, lesion, subject = generate_phantom(subj_spec)
        subject = dataclasses.replace(
            subject,
            subject_id=f"{split}-{idx:03d}",
            split=split,
            scanner_id="scanner-A" if idx % 2 == 0 else "scanner-B",
        )
        vol_name = f"{subject.subject_id}.uvol"
        write_volume(volume, out_dir / vol_name)
        mask_name = None
        if lesioned:
            mask_name = f"{subject.subject_id}.lesion.uvol"
            write_volume(
                Volume(
                    voxels=lesion.mask.astype(np.float32),
                    spacing_mm=volume.spacing_mm,
                    modality="synthetic",
                    brain_mask=lesion.mask,
                ),
                out_dir / mask_name,
            )
        entries[split].append(ManifestEntry(subject, vol_name, mask_name))

    from .volume import save_manifest

    paths = {}
    for split, split_entries in entries.items():
        manifest = DatasetManifest(entries=split_entries, seed=spec.seed, root=str(out_dir))
        path = out_dir / f"{split}.manifest"
        save_manifest(manifest, path)
        paths[split] = path
    return paths


def load_lesion_mask(path: str | Path) -> LesionMask:
    """Read a lesion mask stored in the native volume format."""
    from .uvol import read_volume

    vol = read_volume(path)
    return LesionMask(mask=vol.voxels > 0.5)
