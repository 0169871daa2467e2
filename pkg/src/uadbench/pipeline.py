"""End-to-end benchmark runs: preprocess, train, infer, threshold, evaluate.

A run is described by an ExperimentConfig and produces a RunRecord whose
every number is traceable to the config fingerprint. Threshold fitting is
guarded against test-set leakage and all randomness flows from the single
configured seed.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import TrainConfig, UNetConfig, config_fingerprint, seed_everything
from .data import (
    DatasetManifest,
    SubjectRecord,
    assign_strata,
    group_names,
    load_lesion_mask,
    load_manifest,
    read_volume,
)
from .errors import ConfigError, ThresholdLeakError
from .methods import METHOD_REGISTRY, Detector, make_detector
from .preprocess import minmax_normalize, volume_to_slices
from .scoring import (
    MetricReport,
    ThresholdRecord,
    dice,
    auprc,
    fit_threshold,
    fpr,
    median_filter3d,
    optimal_threshold,
    quantile_grid,
)
from .stats import benjamini_hochberg, cohens_d, mann_whitney_u, scheirer_ray_hare, spearman

logger = logging.getLogger(__name__)

MEDIAN_KERNEL = 4

_POLICIES = ("estimated", "optimal", "both")

# Desk-scale method defaults; explicit method_config entries win.
_DESK_METHOD_DEFAULTS: dict[str, dict] = {
    "fae": {"extractor": {"topology": "tiny_random", "layer_names": ("maxpool", "layer1", "layer2")}},
    "uniad": {
        "extractor": {"topology": "tiny_random", "layer_names": ("layer1", "layer2", "layer3")},
        "feature_grid": 8,
        "neighbor_size": (3, 3),
        "hidden_dim": 64,
        "feedforward_dim": 128,
        "encoder_layers": 2,
        "decoder_layers": 2,
    },
    "rd": {"extractor": {"topology": "tiny_random", "layer_names": ("layer1", "layer2", "layer3")}},
    "patchcore": {
        "extractor": {"topology": "tiny_random", "layer_names": ("layer2", "layer3")},
        "target_dim": 64,
    },
}

_UNET_METHODS = ("riad", "itermask", "andi", "disyre")
_TIME_CONDITIONED = ("andi", "disyre")


@dataclass
class ExperimentConfig:
    """Everything a benchmark run depends on, hashable to a fingerprint."""

    method: str
    train_manifest: str
    validation_manifest: str
    test_manifest: str
    modality: str = "synthetic"
    train_fraction: float = 1.0
    seed: int = 0
    slice_crop: tuple[int, int] | None = None
    slice_downsample: int = 1
    thresholds_policy: str = "both"
    median_filter: bool = True
    grid_points: int = 200
    unet: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    method_config: dict = field(default_factory=dict)
    fixed_hardware: bool = False
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHOD_REGISTRY:
            raise ConfigError(
                f"unknown method {self.method!r}; available: {sorted(METHOD_REGISTRY)}"
            )
        if self.thresholds_policy not in _POLICIES:
            raise ConfigError(
                f"thresholds_policy must be one of {_POLICIES}, got {self.thresholds_policy!r}"
            )
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0,1], got {self.train_fraction}")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be >= 2")
        if self.slice_downsample < 1:
            raise ConfigError(f"slice_downsample must be >= 1, got {self.slice_downsample}")
        for label, p in (
            ("train", self.train_manifest),
            ("validation", self.validation_manifest),
            ("test", self.test_manifest),
        ):
            if not Path(p).exists():
                raise ConfigError(f"{label} manifest does not exist: {p}")
        if self.slice_crop is not None:
            h, w = self.slice_crop
            if h < 1 or w < 1:
                raise ConfigError(f"slice_crop must be positive, got {self.slice_crop}")
            self.slice_crop = (int(h), int(w))

    def fingerprint(self) -> str:
        # output_dir changes where artifacts land, not what gets computed.
        return config_fingerprint(dataclasses.replace(self, output_dir=None))


@dataclass
class RunRecord:
    """Provenance and results of one pipeline run.

    ``failed_stage``/``cause`` are set instead of raising when a stage
    breaks, so partial runs stay inspectable.
    """

    fingerprint: str
    method: str
    seed: int
    tool_version: str = __version__
    config: dict = field(default_factory=dict)
    n_train_subjects: int = 0
    checkpoint_steps: tuple[int, ...] = ()
    selected_step: int | None = None
    thresholds: list[ThresholdRecord] = field(default_factory=list)
    reports: dict[str, MetricReport] = field(default_factory=dict)
    stats: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)
    wall_clock_seconds: float = 0.0
    output_dir: str | None = None
    failed_stage: str | None = None
    cause: str | None = None

    @property
    def success(self) -> bool:
        return self.failed_stage is None


@dataclass
class SubjectResult:
    """One evaluated subject: anomaly volume plus its reference masks."""

    record: SubjectRecord
    anomaly: np.ndarray
    truth: np.ndarray
    brain: np.ndarray

    @property
    def lesioned(self) -> bool:
        return bool(self.truth.any())

    @property
    def lesion_load(self) -> int:
        return int(self.truth.sum())


def _merge_extractor(overrides: dict) -> dict:
    from .backbone import FeatureExtractorSpec

    merged = dict(overrides)
    if isinstance(merged.get("extractor"), dict):
        merged["extractor"] = FeatureExtractorSpec(**merged["extractor"])
    return merged


def _default_k_list(image_size: int) -> tuple[int, ...]:
    ks = tuple(k for k in (8, 16, 28, 32) if image_size % k == 0)
    if not ks:
        raise ConfigError(f"no default inpainting region size tiles image size {image_size}")
    return ks


def build_detector(config: ExperimentConfig, image_size: int) -> tuple[Detector, list[str]]:
    """Construct the configured detector at the working slice resolution.

    Feature methods fall back to the seeded tiny extractor and reduced
    dims unless the method config says otherwise; every substitution is
    returned as a note.
    """
    notes: list[str] = []
    method = config.method
    train_defaults = {
        "max_steps": 200,
        "batch_size": 8,
        "learning_rate": 1e-3,
        "seed": config.seed,
        "fixed_hardware": config.fixed_hardware,
    }
    train_defaults.update(config.train)
    if "checkpoint_interval" not in train_defaults:
        train_defaults["checkpoint_interval"] = max(1, train_defaults["max_steps"] // 4)
    train_cfg = TrainConfig(**train_defaults)

    method_over = _merge_extractor(config.method_config)
    for key, value in _DESK_METHOD_DEFAULTS.get(method, {}).items():
        if key not in method_over:
            method_over[key] = value
            notes.append(f"method default applied: {key}={value!r}")
    method_over = _merge_extractor(method_over)

    if method in _UNET_METHODS:
        unet_defaults = {
            "image_size": image_size,
            "base_dim": 16,
            "channel_multipliers": (1, 2, 2),
            "blocks_per_resolution": (1, 1, 1),
            "time_conditioning": method in _TIME_CONDITIONED,
        }
        unet_defaults.update(config.unet)
        unet_cfg = UNetConfig(**unet_defaults)
        if method == "riad" and "k_list" not in method_over:
            method_over["k_list"] = _default_k_list(image_size)
            notes.append(f"method default applied: k_list={method_over['k_list']!r}")
        if method == "andi" and train_cfg.ema_rate is None:
            train_cfg = dataclasses.replace(train_cfg, ema_rate=0.9999)
            notes.append("method default applied: ema_rate=0.9999")
        from .methods import AndiConfig, DisyreConfig, IterMaskConfig, RiadConfig

        cfg_cls = {
            "riad": RiadConfig,
            "itermask": IterMaskConfig,
            "andi": AndiConfig,
            "disyre": DisyreConfig,
        }[method]
        detector = make_detector(method, unet=unet_cfg, train=train_cfg, config=cfg_cls(**method_over))
    elif method == "patchcore":
        from .methods import PatchCoreConfig

        detector = make_detector(method, config=PatchCoreConfig(**method_over))
    else:
        from .methods import FaeConfig, RdConfig, UniadConfig

        if method == "fae" and "target_resolution" not in method_over:
            method_over["target_resolution"] = max(4, image_size // 4)
            notes.append(
                f"method default applied: target_resolution={method_over['target_resolution']}"
            )
        cfg_cls = {"fae": FaeConfig, "uniad": UniadConfig, "rd": RdConfig}[method]
        detector = make_detector(method, train=train_cfg, config=cfg_cls(**method_over))
    return detector, notes


def _load_subject_arrays(manifest: DatasetManifest, crop: tuple[int, int], downsample: int = 1):
    """Per-subject normalized slice stacks and reference masks."""
    out = []
    for entry in manifest.entries:
        volume = minmax_normalize(read_volume(manifest.resolve(entry.volume_path)))
        stack = volume_to_slices(volume, crop, downsample)
        if entry.lesion_mask_path:
            truth = load_lesion_mask(manifest.resolve(entry.lesion_mask_path)).mask
        else:
            truth = np.zeros(volume.shape, dtype=bool)
        out.append((entry.subject, stack, truth, volume.brain_mask))
    return out


def _infer_crop(manifest: DatasetManifest) -> tuple[int, int]:
    volume = read_volume(manifest.resolve(manifest.entries[0].volume_path))
    return volume.shape[1], volume.shape[2]


def pick_bank_subjects(train_stacks: list, bank_subjects: int, seed: int):
    """Seeded subject subsample for the memory-bank builder, capped at availability."""
    bank_n = min(bank_subjects, len(train_stacks))
    pick = sorted(
        np.random.default_rng(seed).choice(len(train_stacks), size=bank_n, replace=False).tolist()
    )
    return [train_stacks[i] for i in pick], bank_n


def split_selection_holdout(train_stacks: list, method: str):
    """Carve an anomaly-free checkpoint-selection probe off the training subjects.

    Checkpoint selection needs a loss measured on data free of anomalies;
    the lesioned validation manifest would reward reconstructing lesions.
    Roughly a tenth of the training subjects serve instead. The memory-bank
    method has no checkpoints, so it keeps every subject.
    """
    trains_model = method != "patchcore"
    n_hold = max(1, len(train_stacks) // 10) if trains_model and len(train_stacks) > 1 else 0
    if not n_hold:
        return train_stacks, [], None
    note = f"checkpoint selection holdout: {n_hold} of {len(train_stacks)} training subjects"
    return train_stacks[:-n_hold], train_stacks[-n_hold:], note


def infer_manifest(
    detector: Detector, manifest: DatasetManifest, crop: tuple[int, int], downsample: int = 1
) -> list[SubjectResult]:
    """Score every subject of a manifest into full-volume anomaly maps."""
    from .preprocess import reassemble_anomaly_volume

    results = []
    for subject, stack, truth, brain in _load_subject_arrays(manifest, crop, downsample):
        maps = detector.score_batch(stack.as_array())
        # Scores outside the brain mask carry no diagnostic meaning on
        # skull-stripped inputs; zero them so thresholds and pooled metrics
        # reflect in-brain behavior only.
        anomaly = reassemble_anomaly_volume(maps, stack) * brain
        results.append(SubjectResult(record=subject, anomaly=anomaly, truth=truth, brain=brain))
    return results


def _subject_rows(subjects: list[SubjectResult], maps: list[np.ndarray], tau: float):
    rows = []
    for subj, amap in zip(subjects, maps):
        pred = amap > tau
        d = dice(pred, subj.truth)
        if subj.lesioned:
            f = fpr(pred & ~subj.truth, subj.brain & ~subj.truth)
        else:
            f = fpr(pred, subj.brain)
        rows.append((subj.record.subject_id, d, f))
    return rows


def evaluate_blocks(
    test_results: list[SubjectResult],
    estimated: ThresholdRecord,
    grid: np.ndarray,
    config: ExperimentConfig,
) -> tuple[dict[str, MetricReport], list[ThresholdRecord]]:
    """Metric blocks for every requested threshold kind and filter variant.

    Block keys are ``{kind}_{raw|mf}``. Optimal thresholds are refit per
    filter variant on the variant's own maps, over the validation grid.
    """
    kinds = ("estimated", "optimal") if config.thresholds_policy == "both" else (config.thresholds_policy,)
    variants = (False, True) if config.median_filter else (False,)
    raw_maps = [s.anomaly for s in test_results]
    reports: dict[str, MetricReport] = {}
    extra_thresholds: list[ThresholdRecord] = []
    for filtered in variants:
        maps = [median_filter3d(m, MEDIAN_KERNEL) for m in raw_maps] if filtered else raw_maps
        pairs = [(m, s.truth) for m, s in zip(maps, test_results)]
        block_auprc = auprc(pairs)
        suffix = "mf" if filtered else "raw"
        for kind in kinds:
            if kind == "estimated":
                threshold = estimated
            else:
                threshold = optimal_threshold(
                    pairs,
                    grid,
                    method=config.method,
                    modality=config.modality,
                    fitted_on=f"{config.test_manifest}:{suffix}",
                )
                extra_thresholds.append(threshold)
            rows = _subject_rows(test_results, maps, threshold.tau)
            reports[f"{kind}_{suffix}"] = MetricReport(
                per_subject=rows,
                dataset_auprc=block_auprc,
                threshold=threshold,
                filtered=filtered,
            )
    return reports, extra_thresholds


def run_pipeline(config: ExperimentConfig) -> RunRecord:
    """Execute one benchmark run; see ExperimentConfig for the knobs.

    Estimated thresholds are fit on unfiltered validation maps only; the
    run refuses to fit one on a manifest carrying test-split subjects.
    Any other stage failure yields a partial RunRecord naming the stage.
    """
    t_start = time.perf_counter()
    record = RunRecord(
        fingerprint=config.fingerprint(),
        method=config.method,
        seed=config.seed,
        config=dataclasses.asdict(config),
    )
    record.output_dir = config.output_dir
    stage = "setup"
    try:
        stage = "seed"
        seed_everything(config.seed, config.fixed_hardware)

        stage = "load-manifests"
        train_manifest = load_manifest(config.train_manifest, check_paths=True)
        val_manifest = load_manifest(config.validation_manifest, check_paths=True)
        test_manifest = load_manifest(config.test_manifest, check_paths=True)
        if len(train_manifest) == 0:
            raise ConfigError("training manifest is empty")

        stage = "subset-train"
        n_total = len(train_manifest)
        n_keep = int(config.train_fraction * n_total)
        if n_keep < 1:
            raise ConfigError(
                f"train_fraction {config.train_fraction} keeps no subject of {n_total}"
            )
        rng = np.random.default_rng(config.seed)
        keep = sorted(rng.choice(n_total, size=n_keep, replace=False).tolist())
        train_manifest = dataclasses.replace(
            train_manifest, entries=[train_manifest.entries[i] for i in keep]
        )
        record.n_train_subjects = n_keep
        record.notes.append(
            f"train fraction {config.train_fraction}: using {n_keep} of {n_total} training subjects"
        )

        stage = "preprocess"
        crop = config.slice_crop or _infer_crop(train_manifest)
        if config.method in _UNET_METHODS and crop[0] != crop[1]:
            raise ConfigError(f"reconstruction networks need square slices, got crop {crop}")
        down = config.slice_downsample
        train_subjects = _load_subject_arrays(train_manifest, crop, down)

        stage = "build-detector"
        detector, notes = build_detector(config, crop[0] // down)
        record.notes.extend(notes)

        stage = "train"
        train_stacks = train_subjects
        if config.method == "patchcore":
            train_stacks, bank_n = pick_bank_subjects(
                train_subjects, detector.config.bank_subjects, config.seed
            )
            record.notes.append(f"memory bank built from {bank_n} training subjects")
        fit_stacks, hold_stacks, hold_note = split_selection_holdout(train_stacks, config.method)
        if hold_note:
            record.notes.append(hold_note)
        train_slices = np.concatenate([stack.as_array() for _, stack, _, _ in fit_stacks])
        hold_slices = (
            np.concatenate([stack.as_array() for _, stack, _, _ in hold_stacks])
            if hold_stacks
            else None
        )
        detector.fit(train_slices, hold_slices, config.seed)
        record.checkpoint_steps = tuple(detector.checkpoint_steps)
        record.selected_step = detector.selected_step

        stage = "infer"
        val_results = infer_manifest(detector, val_manifest, crop, down)
        test_results = infer_manifest(detector, test_manifest, crop, down)

        stage = "fit-thresholds"
        leaked = [e.subject.subject_id for e in val_manifest.entries if e.subject.split == "test"]
        if leaked:
            raise ThresholdLeakError(
                f"refusing to fit an estimated threshold on test-split subjects: {leaked}"
            )
        val_pairs = [(s.anomaly, s.truth) for s in val_results]
        grid = quantile_grid([s.anomaly for s in val_results], config.grid_points)
        estimated = fit_threshold(
            val_pairs,
            grid,
            method=config.method,
            modality=config.modality,
            fitted_on=str(config.validation_manifest),
        )
        record.thresholds.append(estimated)

        stage = "evaluate"
        reports, extra_thresholds = evaluate_blocks(test_results, estimated, grid, config)
        record.reports = reports
        record.thresholds.extend(extra_thresholds)

        stage = "report"
        if config.output_dir:
            from .report import write_run_outputs

            write_run_outputs(record, test_results, Path(config.output_dir))
    except ThresholdLeakError:
        raise
    except Exception as exc:
        record.failed_stage = stage
        record.cause = f"{type(exc).__name__}: {exc}"
        logger.error("pipeline failed at stage %s: %s", stage, record.cause)
    record.wall_clock_seconds = time.perf_counter() - t_start
    return record


def save_detector(
    detector: Detector, path: str | Path, fingerprint: str = "", extras: dict | None = None
) -> Path:
    """Persist a fitted detector with its provenance fingerprint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "method": detector.name,
        "detector": detector,
        "fingerprint": fingerprint,
        "extras": extras or {},
    }
    torch.save(payload, path)
    return path


def load_detector(path: str | Path) -> tuple[Detector, dict]:
    payload = torch.load(path, weights_only=False)
    for key in ("method", "detector", "fingerprint"):
        if key not in payload:
            raise ConfigError(f"{path} is not a saved detector: missing {key!r}")
    return payload["detector"], payload


def scale_experiment(config: ExperimentConfig, fractions: list[float]) -> tuple[list[RunRecord], list[dict]]:
    """Re-run the same configuration across training-set fractions.

    Only the training subset differs between runs; evaluation follows the
    identical code path, so metric differences trace to training data.
    """
    if not fractions:
        raise ConfigError("need at least one train fraction")
    records, rows = [], []
    for fraction in fractions:
        sub_dir = None
        if config.output_dir:
            sub_dir = str(Path(config.output_dir) / f"fraction-{fraction:g}")
        run_cfg = dataclasses.replace(config, train_fraction=float(fraction), output_dir=sub_dir)
        rec = run_pipeline(run_cfg)
        records.append(rec)
        for block, report in sorted(rec.reports.items()):
            rows.append(
                {
                    "fraction": fraction,
                    "n_train_subjects": rec.n_train_subjects,
                    "block": block,
                    "mean_dice": report.mean_dice(),
                    "mean_fpr": report.mean_fpr(),
                    "auprc": report.dataset_auprc,
                }
            )
    return records, rows


def _split_by_sex(rows: list[tuple[SubjectRecord, float]]):
    males = [v for rec, v in rows if rec.sex == "male"]
    females = [v for rec, v in rows if rec.sex == "female"]
    return males, females


def bias_report(
    report: MetricReport | list[tuple[str, float, float]],
    subjects: list[SubjectRecord],
    alpha: float = 0.05,
    lesion_cohort: bool = False,
) -> list[dict]:
    """Demographic bias tests over a metric report's per-subject rows.

    Accepts a MetricReport or bare (subject_id, dice, fpr) rows. Emits
    Mann-Whitney and Cohen's d (male group first) for FPR by sex, and
    Spearman for age vs FPR (plus age vs Dice on lesion cohorts).
    Subjects with missing age are excluded from age tests; single-sex
    cohorts skip the sex tests with an explicit marker.
    """
    per_subject = report.per_subject if isinstance(report, MetricReport) else list(report)
    by_id = {rec.subject_id: rec for rec in subjects}
    matched = [(by_id[sid], d, f) for sid, d, f in per_subject if sid in by_id]
    missing = len(per_subject) - len(matched)
    if missing:
        logger.warning("bias_report: %d subjects lack demographic records", missing)

    rows: list[dict] = []

    def emit(test, metric, statistic, p_value, n, detail=""):
        rows.append(
            {
                "test": test,
                "metric": metric,
                "statistic": statistic,
                "p_value": p_value,
                "significant": bool(p_value < alpha) if math.isfinite(p_value) else None,
                "n": n,
                "detail": detail,
            }
        )

    males, females = _split_by_sex([(rec, f) for rec, _, f in matched])
    if len(males) >= 2 and len(females) >= 2:
        mwu = mann_whitney_u(males, females)
        emit("mann-whitney-u", "fpr-by-sex", mwu.statistic, mwu.p_value, (len(males), len(females)))
        try:
            d_val = cohens_d(males, females)
            emit("cohens-d", "fpr-by-sex", d_val, float("nan"), (len(males), len(females)),
                 detail="male group first")
        except ConfigError as exc:
            emit("cohens-d", "fpr-by-sex", float("nan"), float("nan"),
                 (len(males), len(females)), detail=f"skipped: {exc}")
    else:
        detail = f"skipped: single-sex cohort ({len(males)} male, {len(females)} female)"
        emit("mann-whitney-u", "fpr-by-sex", float("nan"), float("nan"), (len(males), len(females)), detail)
        emit("cohens-d", "fpr-by-sex", float("nan"), float("nan"), (len(males), len(females)), detail)

    aged = [(rec, d, f) for rec, d, f in matched if math.isfinite(rec.age)]
    excluded = len(matched) - len(aged)
    age_note = f"{excluded} subjects without age excluded" if excluded else ""
    if excluded:
        logger.warning("bias_report: %s", age_note)
    targets = [("fpr", [(rec.age, f) for rec, _, f in aged])]
    if lesion_cohort:
        targets.append(("dice", [(rec.age, d) for rec, d, _ in aged]))
    for metric, pairs in targets:
        if len(pairs) >= 3:
            try:
                res = spearman([a for a, _ in pairs], [v for _, v in pairs])
                emit("spearman", f"age-vs-{metric}", res.extras["rho"], res.p_value,
                     len(pairs), detail=age_note)
            except ConfigError as exc:
                emit("spearman", f"age-vs-{metric}", float("nan"), float("nan"),
                     len(pairs), detail=f"skipped: {exc}")
        else:
            emit("spearman", f"age-vs-{metric}", float("nan"), float("nan"),
                 len(pairs), detail="skipped: fewer than 3 aged subjects")
    return rows


def ood_report(
    id_rows: list[tuple[str, int, float]],
    ood_rows: list[tuple[str, int, float]],
    percentiles: tuple[float, ...] = (25.0, 50.0, 75.0),
    alpha: float = 0.05,
) -> dict:
    """Compare matched cohorts per lesion-load stratum.

    Rows are (subject_id, lesion_load, dice) triples. Strata come from
    the POOLED cohort's lesion-load percentiles; per-stratum Mann-Whitney
    p-values are Benjamini-Hochberg corrected across the tested strata,
    and a site-by-load Scheirer-Ray-Hare test runs on the pooled Dice.
    """
    if not id_rows or not ood_rows:
        raise ConfigError("both cohorts must be nonempty")
    pooled = list(id_rows) + list(ood_rows)
    strata = assign_strata([load for _, load, _ in pooled], percentiles)
    names = group_names(len(percentiles) + 1)
    sites = ["ID"] * len(id_rows) + ["OOD"] * len(ood_rows)

    per_stratum: dict[str, dict[str, list[float]]] = {n: {"ID": [], "OOD": []} for n in names}
    for (sid, load, d), stratum, site in zip(pooled, strata, sites):
        per_stratum[stratum][site].append(d)

    notes: list[str] = []
    tested, raw_ps, stats_rows = [], [], []
    for name in names:
        id_d, ood_d = per_stratum[name]["ID"], per_stratum[name]["OOD"]
        if not id_d or not ood_d:
            notes.append(f"stratum {name} skipped: {len(id_d)} ID vs {len(ood_d)} OOD subjects")
            logger.warning(notes[-1])
            continue
        res = mann_whitney_u(id_d, ood_d)
        tested.append(name)
        raw_ps.append(res.p_value)
        stats_rows.append(
            {
                "stratum": name,
                "n_id": len(id_d),
                "n_ood": len(ood_d),
                "statistic": res.statistic,
                "p_value": res.p_value,
            }
        )
    adjusted = benjamini_hochberg(raw_ps) if raw_ps else []
    for row, adj in zip(stats_rows, adjusted):
        row["p_adjusted"] = adj
        row["significant"] = bool(adj < alpha)

    srh = None
    try:
        srh = scheirer_ray_hare([d for _, _, d in pooled], sites, strata)
    except ConfigError as exc:
        notes.append(f"scheirer-ray-hare skipped: {exc}")
        logger.warning(notes[-1])
    return {"strata": stats_rows, "srh": srh, "notes": notes}
