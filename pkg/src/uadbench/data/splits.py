"""Cohort stratification and validation split construction."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .volume import DatasetManifest, LesionMask, SubjectRecord

logger = logging.getLogger(__name__)

_GROUP_LADDERS = {
    2: ("Lower", "Top"),
    3: ("Lower", "Middle", "Top"),
    4: ("Lower", "Middle", "Upper", "Top"),
}


def group_names(n_groups: int) -> tuple[str, ...]:
    """Ordered stratum names for a given group count."""
    if n_groups in _GROUP_LADDERS:
        return _GROUP_LADDERS[n_groups]
    if n_groups < 2:
        raise ConfigError("stratification needs at least one percentile cut")
    return ("Lower",) + tuple(f"Group{i}" for i in range(2, n_groups)) + ("Top",)


def assign_strata(
    loads: Sequence[float],
    percentiles: Sequence[float] = (25.0, 50.0, 75.0),
) -> list[str]:
    """Name the lesion-load stratum of each entry at cohort percentiles.

    Cut points use linear-interpolation percentiles over all given loads.
    The lowest stratum is closed above (load <= first cut); every
    following stratum is the half-open interval (previous cut, cut], and
    the top stratum is open above.
    """
    if len(loads) == 0:
        raise ConfigError("cannot stratify an empty cohort")
    pcts = [float(p) for p in percentiles]
    if any(not 0.0 < p < 100.0 for p in pcts) or sorted(pcts) != pcts or len(set(pcts)) != len(pcts):
        raise ConfigError(f"percentiles must be strictly increasing in (0, 100), got {percentiles}")
    values = np.asarray(loads, dtype=np.float64)
    cuts = np.percentile(values, pcts)
    names = group_names(len(pcts) + 1)
    # searchsorted(left) puts load == cut at that cut's stratum,
    # matching the closed-above boundary rule.
    return [names[int(np.searchsorted(cuts, v, side="left"))] for v in values]


def stratify_by_lesion_load(
    subjects: Sequence[tuple[SubjectRecord, LesionMask]],
    percentiles: Sequence[float] = (25.0, 50.0, 75.0),
) -> dict[str, list[SubjectRecord]]:
    """Partition subjects into lesion-load strata at cohort percentiles.

    Boundary semantics follow ``assign_strata``; every subject lands in
    exactly one stratum and empty strata keep an empty list.
    """
    ids = [rec.subject_id for rec, _ in subjects]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate subject_id in stratification input")
    strata = assign_strata([mask.lesion_load for _, mask in subjects], percentiles)
    groups: dict[str, list[SubjectRecord]] = {name: [] for name in group_names(len(percentiles) + 1)}
    for (rec, _), name in zip(subjects, strata):
        groups[name].append(rec)
    return groups


def make_validation_split(
    manifests: Sequence[DatasetManifest],
    fraction: float,
    seed: int,
) -> tuple[DatasetManifest, DatasetManifest, list[str]]:
    """Draw a validation subset from each source dataset; rest becomes test.

    Per dataset, ceil(fraction * n) subjects are sampled without replacement.
    Empty datasets are skipped with a warning note. Entry paths in the merged
    outputs are resolved to absolute so mixed roots stay loadable.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    val_entries = []
    test_entries = []
    notes = []
    for manifest in manifests:
        n = len(manifest.entries)
        if n == 0:
            note = f"dataset with seed {manifest.seed} is empty; skipped"
            logger.warning(note)
            notes.append(note)
            continue
        k = math.ceil(fraction * n)
        chosen = set(rng.choice(n, size=k, replace=False).tolist())
        root = Path(manifest.root)
        for i, entry in enumerate(manifest.entries):
            split = "validation" if i in chosen else "test"
            entry = dataclasses.replace(
                entry,
                subject=dataclasses.replace(entry.subject, split=split),
                volume_path=str((root / entry.volume_path).resolve()),
                lesion_mask_path=(
                    None
                    if entry.lesion_mask_path is None
                    else str((root / entry.lesion_mask_path).resolve())
                ),
            )
            (val_entries if split == "validation" else test_entries).append(entry)
    validation = DatasetManifest(entries=val_entries, seed=seed, root=".", notes=list(notes))
    test = DatasetManifest(entries=test_entries, seed=seed, root=".", notes=list(notes))
    return validation, test, notes
