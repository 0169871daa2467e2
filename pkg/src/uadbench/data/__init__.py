from .nifti import read_nifti
from .phantom import CohortSpec, PhantomSpec, generate_phantom, load_lesion_mask, write_cohort
from .splits import assign_strata, group_names, make_validation_split, stratify_by_lesion_load
from .uvol import read_volume, write_volume
from .volume import (
    COHORTS,
    MODALITIES,
    SEXES,
    SPLITS,
    DatasetManifest,
    LesionMask,
    ManifestEntry,
    SubjectRecord,
    Volume,
    load_manifest,
    save_manifest,
)

__all__ = [
    "COHORTS",
    "MODALITIES",
    "SEXES",
    "SPLITS",
    "CohortSpec",
    "DatasetManifest",
    "LesionMask",
    "ManifestEntry",
    "PhantomSpec",
    "SubjectRecord",
    "Volume",
    "assign_strata",
    "generate_phantom",
    "group_names",
    "load_lesion_mask",
    "load_manifest",
    "make_validation_split",
    "read_nifti",
    "read_volume",
    "save_manifest",
    "stratify_by_lesion_load",
    "write_cohort",
    "write_volume",
]
