"""Command line front end for the benchmark.

Each command wraps one pipeline stage so runs can be scripted and
resumed. Artifacts flow between stages as files: a trained detector,
anomaly-map volumes with a small JSON index, threshold tables, and the
delimited metric reports. Exit status is zero only on full success.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path

import click
import numpy as np

from .backbone import seed_everything
from .data import (
    CohortSpec,
    Volume,
    load_lesion_mask,
    load_manifest,
    read_volume,
    save_manifest,
    write_cohort,
    write_volume,
)
from .errors import UadBenchError
from .pipeline import (
    ExperimentConfig,
    RunRecord,
    SubjectResult,
    bias_report,
    build_detector,
    evaluate_blocks,
    infer_manifest,
    load_detector,
    ood_report,
    run_pipeline,
    save_detector,
    scale_experiment,
)
from .preprocess import minmax_normalize
from .scoring import fit_threshold, quantile_grid

MAPS_INDEX = "maps.json"


def _fail(message: str) -> None:
    raise click.ClickException(message)


def _load_config(path: str, seed: int | None, fixed_hardware: bool) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        _fail(f"cannot read config {path}: {exc}")
    overrides: dict = {}
    if seed is not None:
        overrides["seed"] = seed
    if fixed_hardware:
        overrides["fixed_hardware"] = True
    payload.update(overrides)
    if isinstance(payload.get("slice_crop"), list):
        payload["slice_crop"] = tuple(payload["slice_crop"])
    try:
        return ExperimentConfig(**payload)
    except (TypeError, UadBenchError) as exc:
        _fail(f"invalid config {path}: {exc}")


def _infer_crop_cli(config: ExperimentConfig) -> tuple[int, int]:
    if config.slice_crop is not None:
        return config.slice_crop
    manifest = load_manifest(config.train_manifest)
    volume = read_volume(manifest.resolve(manifest.entries[0].volume_path))
    return volume.shape[1], volume.shape[2]


@click.group()
@click.version_option(package_name="uadbench")
def main() -> None:
    """Benchmark unsupervised anomaly detectors on volumetric brain images."""


@main.command("phantom-gen")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--n-train", default=40, show_default=True)
@click.option("--n-validation", default=10, show_default=True)
@click.option("--n-test", default=20, show_default=True)
@click.option("--n-test-healthy", default=0, show_default=True)
@click.option("--grid", default=64, show_default=True, help="Cubic volume edge length.")
@click.option("--lesion-radius", nargs=2, type=int, default=(4, 8), show_default=True)
@click.option("--lesion-contrast", default=0.3, show_default=True)
@click.option("--noise-std", default=0.02, show_default=True)
@click.option("--radius-cycle", default="", help="Comma-separated lesion radii cycled over test subjects.")
@click.option("--seed", default=0, show_default=True)
def phantom_gen(out_dir, n_train, n_validation, n_test, n_test_healthy, grid,
                lesion_radius, lesion_contrast, noise_std, radius_cycle, seed) -> None:
    """Generate a seeded synthetic cohort with train/validation/test manifests."""
    cycle = tuple(int(r) for r in radius_cycle.split(",") if r.strip()) or None
    spec = CohortSpec(
        n_train=n_train,
        n_validation=n_validation,
        n_test=n_test,
        n_test_healthy=n_test_healthy,
        grid_shape=(grid, grid, grid),
        lesion_radius_range=tuple(lesion_radius),
        lesion_contrast=lesion_contrast,
        noise_std=noise_std,
        test_radius_cycle=cycle,
        seed=seed,
    )
    try:
        manifests = write_cohort(spec, out_dir)
    except UadBenchError as exc:
        _fail(str(exc))
    for split, path in sorted(manifests.items()):
        click.echo(f"{split}: {path}")


@main.command("preprocess")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def preprocess_cmd(manifest_path, out_dir) -> None:
    """Min-max normalize every volume of a manifest into a new manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(manifest_path)
    entries = []
    for entry in manifest.entries:
        volume = minmax_normalize(read_volume(manifest.resolve(entry.volume_path)))
        rel = Path(entry.volume_path).name
        write_volume(volume, out / rel)
        mask_rel = None
        if entry.lesion_mask_path:
            mask_rel = Path(entry.lesion_mask_path).name
            (out / mask_rel).write_bytes(manifest.resolve(entry.lesion_mask_path).read_bytes())
            sidecar = manifest.resolve(entry.lesion_mask_path).with_suffix(".json")
            if sidecar.exists():
                (out / mask_rel).with_suffix(".json").write_bytes(sidecar.read_bytes())
        entries.append(dataclasses.replace(entry, volume_path=rel, lesion_mask_path=mask_rel))
    new_manifest = dataclasses.replace(manifest, entries=entries, root=str(out))
    target = out / Path(manifest_path).name
    save_manifest(new_manifest, target)
    click.echo(f"normalized {len(entries)} volumes -> {target}")


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--fixed-hardware", is_flag=True, help="Force deterministic kernels.")
def train_cmd(config_path, out_dir, seed, fixed_hardware) -> None:
    """Fit the configured detector and save it next to its provenance."""
    config = _load_config(config_path, seed, fixed_hardware)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        seed_everything(config.seed, config.fixed_hardware)
        train_manifest = load_manifest(config.train_manifest)
        n_total = len(train_manifest)
        n_keep = int(config.train_fraction * n_total)
        if n_keep < 1:
            _fail(f"train_fraction {config.train_fraction} keeps no subject of {n_total}")
        keep = sorted(
            np.random.default_rng(config.seed).choice(n_total, size=n_keep, replace=False).tolist()
        )
        train_manifest = dataclasses.replace(
            train_manifest, entries=[train_manifest.entries[i] for i in keep]
        )
        crop = _infer_crop_cli(config)
        down = config.slice_downsample
        detector, notes = build_detector(config, crop[0] // down)
        from .pipeline import _load_subject_arrays, pick_bank_subjects, split_selection_holdout

        train_stacks = _load_subject_arrays(train_manifest, crop, down)
        if config.method == "patchcore":
            train_stacks, bank_n = pick_bank_subjects(
                train_stacks, detector.config.bank_subjects, config.seed
            )
            notes.append(f"memory bank built from {bank_n} training subjects")
        fit_stacks, hold_stacks, hold_note = split_selection_holdout(train_stacks, config.method)
        if hold_note:
            notes.append(hold_note)
        train_slices = np.concatenate([s.as_array() for _, s, _, _ in fit_stacks])
        hold_slices = (
            np.concatenate([s.as_array() for _, s, _, _ in hold_stacks])
            if hold_stacks
            else None
        )
        detector.fit(train_slices, hold_slices, config.seed)
    except UadBenchError as exc:
        _fail(str(exc))
    fingerprint = config.fingerprint()
    detector_path = save_detector(
        detector, out / "detector.pt", fingerprint, extras={"crop": crop, "downsample": down}
    )
    (out / "train_record.json").write_text(
        json.dumps(
            {
                "fingerprint": fingerprint,
                "method": config.method,
                "seed": config.seed,
                "n_train_subjects": n_keep,
                "crop": list(crop),
                "checkpoint_steps": list(detector.checkpoint_steps),
                "selected_step": detector.selected_step,
                "notes": notes,
            },
            indent=2,
        )
        + "\n"
    )
    click.echo(f"trained {config.method} on {n_keep} subjects -> {detector_path}")


@main.command("infer")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--detector", "detector_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", type=click.Choice(["validation", "test"]), default="test", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--fixed-hardware", is_flag=True)
def infer_cmd(config_path, detector_path, split, out_dir, seed, fixed_hardware) -> None:
    """Score one manifest into anomaly-map volumes plus a JSON index."""
    config = _load_config(config_path, seed, fixed_hardware)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        seed_everything(config.seed, config.fixed_hardware)
        detector, payload = load_detector(detector_path)
        if payload["method"] != config.method:
            _fail(f"detector was trained as {payload['method']!r}, config says {config.method!r}")
        crop = tuple(payload["extras"].get("crop") or _infer_crop_cli(config))
        down = int(payload["extras"].get("downsample") or config.slice_downsample)
        manifest_path = config.validation_manifest if split == "validation" else config.test_manifest
        manifest = load_manifest(manifest_path)
        results = infer_manifest(detector, manifest, crop, down)
    except UadBenchError as exc:
        _fail(str(exc))
    index = {
        "source_manifest": str(Path(manifest_path).resolve()),
        "split": split,
        "fingerprint": payload["fingerprint"],
        "entries": [],
    }
    for res in results:
        rel = f"{res.record.subject_id}.anomaly.uvol"
        amap = Volume(
            voxels=res.anomaly.astype(np.float32),
            spacing_mm=(1.0, 1.0, 1.0),
            modality=config.modality,
            brain_mask=res.brain,
        )
        write_volume(amap, out / rel)
        index["entries"].append({"subject_id": res.record.subject_id, "map_path": rel})
    (out / MAPS_INDEX).write_text(json.dumps(index, indent=2) + "\n")
    click.echo(f"scored {len(results)} subjects -> {out / MAPS_INDEX}")


def _load_scored(maps_dir: Path) -> tuple[list[SubjectResult], dict]:
    index_path = maps_dir / MAPS_INDEX
    if not index_path.exists():
        _fail(f"no {MAPS_INDEX} in {maps_dir}; run infer first")
    index = json.loads(index_path.read_text())
    manifest = load_manifest(index["source_manifest"])
    by_id = {e.subject.subject_id: e for e in manifest.entries}
    results = []
    for row in index["entries"]:
        entry = by_id.get(row["subject_id"])
        if entry is None:
            _fail(f"subject {row['subject_id']} missing from {index['source_manifest']}")
        amap = read_volume(maps_dir / row["map_path"])
        if entry.lesion_mask_path:
            truth = load_lesion_mask(manifest.resolve(entry.lesion_mask_path)).mask
        else:
            truth = np.zeros(amap.shape, dtype=bool)
        results.append(
            SubjectResult(record=entry.subject, anomaly=amap.voxels, truth=truth, brain=amap.brain_mask)
        )
    return results, index


@main.command("fit-threshold")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--maps-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def fit_threshold_cmd(config_path, maps_dir, out_dir) -> None:
    """Fit the estimated threshold on validation anomaly maps."""
    from .errors import ThresholdLeakError
    from .report import write_thresholds_csv

    config = _load_config(config_path, None, False)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, index = _load_scored(Path(maps_dir))
    leaked = [r.record.subject_id for r in results if r.record.split == "test"]
    if leaked:
        raise ThresholdLeakError(
            f"refusing to fit an estimated threshold on test-split subjects: {leaked}"
        )
    try:
        grid = quantile_grid([r.anomaly for r in results], config.grid_points)
        estimated = fit_threshold(
            [(r.anomaly, r.truth) for r in results],
            grid,
            method=config.method,
            modality=config.modality,
            fitted_on=index["source_manifest"],
        )
    except UadBenchError as exc:
        _fail(str(exc))
    np.save(out / "grid.npy", grid)
    path = write_thresholds_csv([estimated], out / "thresholds.csv", index["fingerprint"])
    click.echo(f"estimated tau={estimated.tau:.6g} (mean Dice {estimated.mean_dice:.4f}) -> {path}")


@main.command("evaluate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--maps-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--thresholds-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def evaluate_cmd(config_path, maps_dir, thresholds_dir, out_dir) -> None:
    """Score test maps against every threshold kind and filter variant."""
    from .report import write_run_outputs
    from .scoring import ThresholdRecord

    config = _load_config(config_path, None, False)
    tdir = Path(thresholds_dir)
    grid_path, csv_path = tdir / "grid.npy", tdir / "thresholds.csv"
    if not grid_path.exists() or not csv_path.exists():
        _fail(f"{thresholds_dir} lacks grid.npy/thresholds.csv; run fit-threshold first")
    grid = np.load(grid_path)
    with csv_path.open() as fh:
        rows = [r for r in csv.DictReader(fh) if r["kind"] == "estimated"]
    if not rows:
        _fail(f"no estimated threshold in {csv_path}")
    row = rows[0]
    estimated = ThresholdRecord(
        method=row["method"],
        modality=row["modality"],
        tau=float(row["tau"]),
        kind="estimated",
        fitted_on=row["fitted_on"],
        grid=row["grid"],
        mean_dice=float(row["mean_dice"]),
    )
    results, index = _load_scored(Path(maps_dir))
    try:
        reports, extra = evaluate_blocks(results, estimated, grid, config)
    except UadBenchError as exc:
        _fail(str(exc))
    record = RunRecord(
        fingerprint=index["fingerprint"] or config.fingerprint(),
        method=config.method,
        seed=config.seed,
        config=dataclasses.asdict(config),
        thresholds=[estimated] + extra,
        reports=reports,
    )
    paths = write_run_outputs(record, results, out_dir)
    for block in sorted(reports):
        rep = reports[block]
        click.echo(f"{block}: mean_dice={rep.mean_dice():.4f} mean_fpr={rep.mean_fpr():.5f} auprc={rep.dataset_auprc:.4f}")
    click.echo(f"wrote {len(paths)} artifacts to {out_dir}")


def _read_metric_rows(path: str) -> list[tuple[str, float, float]]:
    with Path(path).open() as fh:
        reader = csv.DictReader(fh)
        return [
            (r["subject_id"], float(r["dice"]), float(r["fpr"]))
            for r in reader
            if r["subject_id"] != "dataset"
        ]


@main.group("stats")
def stats_group() -> None:
    """Statistical follow-up analyses on metric reports."""


@stats_group.command("bias")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="Per-subject metric CSV, typically the median-filtered block.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--lesion-cohort", is_flag=True, help="Also test age against Dice.")
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--fingerprint", default="")
def stats_bias(metrics_path, manifest_path, lesion_cohort, alpha, out_path, fingerprint) -> None:
    """Demographic bias tests: sex vs FPR, age vs FPR (and Dice)."""
    from .report import write_stats_csv

    rows = _read_metric_rows(metrics_path)
    manifest = load_manifest(manifest_path, check_paths=False)
    try:
        table = bias_report(rows, [e.subject for e in manifest.entries],
                            alpha=alpha, lesion_cohort=lesion_cohort)
    except UadBenchError as exc:
        _fail(str(exc))
    path = write_stats_csv(table, out_path, fingerprint)
    for row in table:
        flag = {True: "significant", False: "not significant", None: "n/a"}[row["significant"]]
        click.echo(f"{row['test']} {row['metric']}: stat={row['statistic']:.4g} p={row['p_value']:.4g} ({flag})")
    click.echo(f"wrote {path}")


def _rows_with_loads(metrics_path: str, manifest_path: str) -> list[tuple[str, int, float]]:
    manifest = load_manifest(manifest_path)
    loads = {}
    for entry in manifest.entries:
        if entry.lesion_mask_path is None:
            _fail(f"{entry.subject.subject_id} in {manifest_path} has no lesion mask")
        loads[entry.subject.subject_id] = load_lesion_mask(
            manifest.resolve(entry.lesion_mask_path)
        ).lesion_load
    rows = []
    for sid, dice_val, _ in _read_metric_rows(metrics_path):
        if sid not in loads:
            _fail(f"subject {sid} from {metrics_path} missing in {manifest_path}")
        rows.append((sid, loads[sid], dice_val))
    return rows


@stats_group.command("ood")
@click.option("--id-metrics", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ood-metrics", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--id-manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--ood-manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--percentiles", default="25,50,75", show_default=True)
@click.option("--alpha", default=0.05, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--fingerprint", default="")
def stats_ood(id_metrics, ood_metrics, id_manifest, ood_manifest, percentiles, alpha, out_path, fingerprint) -> None:
    """Compare matched cohorts per lesion-load stratum."""
    from .report import write_stats_csv

    pcts = tuple(float(p) for p in percentiles.split(",") if p.strip())
    try:
        result = ood_report(
            _rows_with_loads(id_metrics, id_manifest),
            _rows_with_loads(ood_metrics, ood_manifest),
            percentiles=pcts,
            alpha=alpha,
        )
    except UadBenchError as exc:
        _fail(str(exc))
    table = [dict(row, test="mann-whitney-u") for row in result["strata"]]
    if result["srh"] is not None:
        for effect, res in result["srh"].items():
            table.append(
                {
                    "test": "scheirer-ray-hare",
                    "stratum": effect,
                    "statistic": res.statistic,
                    "p_value": res.p_value,
                    "df": res.extras["df"],
                }
            )
    path = write_stats_csv(table, out_path, fingerprint)
    for row in result["strata"]:
        click.echo(
            f"{row['stratum']}: U={row['statistic']:.4g} p={row['p_value']:.4g} "
            f"adj={row['p_adjusted']:.4g} ({'significant' if row['significant'] else 'not significant'})"
        )
    for note in result["notes"]:
        click.echo(f"note: {note}")
    click.echo(f"wrote {path}")


@main.command("report")
@click.option("--run-dir", required=True, type=click.Path(exists=True, file_okay=False),
              help="Directory holding run_summary.csv and metrics_*.csv.")
@click.option("--manifest", "manifest_path", default=None, type=click.Path(exists=True, dir_okay=False),
              help="Manifest supplying subject ages for the FPR scatter.")
def report_cmd(run_dir, manifest_path) -> None:
    """Render figures next to the delimited outputs of an evaluate run."""
    from .report import plot_bar, plot_fpr_vs_age

    run = Path(run_dir)
    summary = run / "run_summary.csv"
    if not summary.exists():
        _fail(f"{run_dir} has no run_summary.csv; run evaluate first")
    with summary.open() as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        _fail(f"{summary} is empty")
    method = rows[0]["method"]
    blocks = [r["block"] for r in rows]
    plot_bar(
        blocks,
        [float(r["mean_dice"]) for r in rows],
        "mean Dice",
        f"{method}: threshold and filter variants",
        run / "dice_blocks.png",
    )
    written = ["dice_blocks.png"]
    if manifest_path:
        manifest = load_manifest(manifest_path, check_paths=False)
        ages = {e.subject.subject_id: e.subject.age for e in manifest.entries}
        block = "estimated_mf" if "estimated_mf" in blocks else blocks[0]
        pairs = [
            (ages[sid], f)
            for sid, _, f in _read_metric_rows(run / f"metrics_{block}.csv")
            if sid in ages and math.isfinite(ages[sid]) and math.isfinite(f)
        ]
        plot_fpr_vs_age(pairs, run / "fpr_vs_age.png", title=f"{method} ({block})")
        written.append("fpr_vs_age.png")
    click.echo(f"rendered {', '.join(written)} in {run_dir}")


@main.command("scale-experiment")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--fractions", default="0.25,0.5,1.0", show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--fixed-hardware", is_flag=True)
def scale_cmd(config_path, fractions, out_dir, seed, fixed_hardware) -> None:
    """Run the full pipeline across training-set fractions."""
    from .report import write_stats_csv

    config = _load_config(config_path, seed, fixed_hardware)
    config = dataclasses.replace(config, output_dir=str(out_dir))
    fracs = [float(f) for f in fractions.split(",") if f.strip()]
    try:
        records, rows = scale_experiment(config, fracs)
    except UadBenchError as exc:
        _fail(str(exc))
    path = write_stats_csv(rows, Path(out_dir) / "scaling.csv", config.fingerprint())
    failed = [r for r in records if not r.success]
    for rec, frac in zip(records, fracs):
        status = "ok" if rec.success else f"FAILED at {rec.failed_stage}: {rec.cause}"
        click.echo(f"fraction {frac:g} ({rec.n_train_subjects} subjects): {status}")
    click.echo(f"wrote {path}")
    if failed:
        _fail(f"{len(failed)} of {len(records)} runs failed")


if __name__ == "__main__":
    main()
