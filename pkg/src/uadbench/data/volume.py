"""Core data model: volumes, lesion masks, subject metadata, manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MODALITIES = ("T1w", "T2w", "synthetic")
SEXES = ("male", "female")
COHORTS = ("healthy", "tumor", "stroke", "ms", "wmh", "synthetic")
SPLITS = ("train", "validation", "test")


@dataclass
class Volume:
    """3D scalar field with spacing, modality tag and brain mask.

    All voxel values must be finite, the mask shape must match the voxel
    grid and spacing components must be positive.
    """

    voxels: np.ndarray
    spacing_mm: tuple[float, float, float]
    modality: str
    brain_mask: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        self.brain_mask = np.asarray(self.brain_mask, dtype=bool)
        if self.voxels.ndim != 3:
            raise ConfigError(f"voxels must be 3D, got ndim={self.voxels.ndim}")
        if not np.all(np.isfinite(self.voxels)):
            raise ConfigError("voxels contain non-finite values")
        if self.brain_mask.shape != self.voxels.shape:
            raise ConfigError(
                f"brain_mask shape {self.brain_mask.shape} != voxels shape {self.voxels.shape}"
            )
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing_mm must be 3 positive reals, got {self.spacing_mm}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class LesionMask:
    """Binary lesion mask paired with the count of true voxels."""

    mask: np.ndarray
    lesion_load: int = -1

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ConfigError(f"lesion mask must be 3D, got ndim={self.mask.ndim}")
        n_true = int(self.mask.sum())
        if self.lesion_load < 0:
            self.lesion_load = n_true
        elif self.lesion_load != n_true:
            raise ConfigError(
                f"lesion_load {self.lesion_load} != true-voxel count {n_true}"
            )


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    age: float
    sex: str
    scanner_id: str
    cohort: str
    split: str

    def __post_init__(self):
        if self.age < 0:
            raise ConfigError(f"age must be nonnegative, got {self.age}")
        if self.sex not in SEXES:
            raise ConfigError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.cohort not in COHORTS:
            raise ConfigError(f"cohort must be one of {COHORTS}, got {self.cohort!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")


@dataclass
class ManifestEntry:
    subject: SubjectRecord
    volume_path: str
    lesion_mask_path: str | None = None


@dataclass
class DatasetManifest:
    """Ordered collection of subjects with paths to their volumes.

    Immutable after load by convention; subject ids must be unique.
    ``root`` anchors the relative paths of the entries.
    """

    entries: list[ManifestEntry]
    seed: int = 0
    root: str = "."
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.subject.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigError(f"duplicate subject_id in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def subject_ids(self) -> list[str]:
        return [e.subject.subject_id for e in self.entries]

    def resolve(self, rel: str) -> Path:
        return Path(self.root) / rel


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write one JSON record per line: subject fields plus relative paths."""
    path = Path(path)
    with path.open("w") as fh:
        for e in manifest.entries:
            rec = {
                "subject_id": e.subject.subject_id,
                "volume_path": e.volume_path,
                "lesion_mask_path": e.lesion_mask_path,
                "age": e.subject.age,
                "sex": e.subject.sex,
                "scanner_id": e.subject.scanner_id,
                "cohort": e.subject.cohort,
                "split": e.subject.split,
            }
            fh.write(json.dumps(rec) + "\n")


def load_manifest(path: str | Path, seed: int = 0, check_paths: bool = True) -> DatasetManifest:
    """Read a manifest written by :func:`save_manifest`.

    Relative paths are anchored at the manifest's directory. With
    ``check_paths`` every referenced file must resolve.
    """
    path = Path(path)
    root = path.parent
    entries = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid manifest record: {exc}") from exc
            subject = SubjectRecord(
                subject_id=rec["subject_id"],
                age=float(rec["age"]),
                sex=rec["sex"],
                scanner_id=rec["scanner_id"],
                cohort=rec["cohort"],
                split=rec["split"],
            )
            entries.append(
                ManifestEntry(subject, rec["volume_path"], rec.get("lesion_mask_path"))
            )
    manifest = DatasetManifest(entries=entries, seed=seed, root=str(root))
    if check_paths:
        for e in manifest.entries:
            vp = manifest.resolve(e.volume_path)
            if not vp.exists():
                raise ConfigError(f"manifest volume path not resolvable: {vp}")
            if e.lesion_mask_path is not None:
                mp = manifest.resolve(e.lesion_mask_path)
                if not mp.exists():
                    raise ConfigError(f"manifest lesion mask path not resolvable: {mp}")
    return manifest
