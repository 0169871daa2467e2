"""Delimited reports and static figures for benchmark runs.

Every CSV row carries the run fingerprint so any emitted number can be
traced back to its resolved configuration. Float formatting is fixed to
ten significant digits, which keeps repeated runs byte-comparable.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .scoring import MetricReport, ThresholdRecord  # noqa: E402


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.10g}"
    if value is None:
        return ""
    return str(value)


def _write_rows(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def write_metric_csv(report: MetricReport, path: str | Path, fingerprint: str = "") -> Path:
    """Per-subject Dice/FPR rows plus a final dataset summary row."""
    rows = [[fingerprint, sid, d, f, None] for sid, d, f in report.per_subject]
    rows.append([fingerprint, "dataset", report.mean_dice(), report.mean_fpr(), report.dataset_auprc])
    return _write_rows(Path(path), ["fingerprint", "subject_id", "dice", "fpr", "auprc"], rows)


def write_thresholds_csv(thresholds: list[ThresholdRecord], path: str | Path, fingerprint: str = "") -> Path:
    rows = [
        [fingerprint, t.method, t.modality, t.kind, t.fitted_on, t.tau, t.grid, t.mean_dice]
        for t in thresholds
    ]
    header = ["fingerprint", "method", "modality", "kind", "fitted_on", "tau", "grid", "mean_dice"]
    return _write_rows(Path(path), header, rows)


def write_run_summary(record, path: str | Path) -> Path:
    """One aggregate row per metric block of a run."""
    rows = []
    for block in sorted(record.reports):
        rep = record.reports[block]
        rows.append(
            [
                record.fingerprint,
                record.method,
                block,
                rep.threshold.kind,
                rep.filtered,
                rep.threshold.tau,
                rep.mean_dice(),
                rep.mean_fpr(),
                rep.dataset_auprc,
                len(rep.per_subject),
            ]
        )
    header = [
        "fingerprint",
        "method",
        "block",
        "kind",
        "filtered",
        "tau",
        "mean_dice",
        "mean_fpr",
        "auprc",
        "n_subjects",
    ]
    return _write_rows(Path(path), header, rows)


def write_stats_csv(rows: list[dict], path: str | Path, fingerprint: str = "") -> Path:
    """Generic dict rows; columns follow first-seen key order."""
    header: list[str] = ["fingerprint"]
    for row in rows:
        for key in row:
            if key not in header:
                header.append(key)
    out = [[fingerprint] + [row.get(k) for k in header[1:]] for row in rows]
    return _write_rows(Path(path), header, out)


def plot_bar(labels: list[str], values: list[float], ylabel: str, title: str, path: str | Path) -> Path:
    """Labeled bar chart written to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(labels)), values, color="#4878cf")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_block_means(record, path: str | Path) -> Path:
    """Bar chart of mean Dice per metric block."""
    blocks = sorted(record.reports)
    values = [record.reports[b].mean_dice() for b in blocks]
    return plot_bar(blocks, values, "mean Dice", f"{record.method}: threshold and filter variants", path)


def plot_fpr_vs_age(pairs: list[tuple[float, float]], path: str | Path, title: str = "") -> Path:
    """Scatter of per-subject FPR against age."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 4))
    if pairs:
        ax.scatter([a for a, _ in pairs], [f for _, f in pairs], s=18, alpha=0.8)
    ax.set_xlabel("age [years]")
    ax.set_ylabel("false positive rate")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def write_run_outputs(record, test_results, out_dir: str | Path) -> dict[str, Path]:
    """Write the full artifact set of one run into ``out_dir``.

    Metric CSV per block, thresholds, an aggregate summary, the resolved
    config, and the static figures. Returns the paths keyed by artifact.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for block in sorted(record.reports):
        paths[f"metrics_{block}"] = write_metric_csv(
            record.reports[block], out_dir / f"metrics_{block}.csv", record.fingerprint
        )
    paths["thresholds"] = write_thresholds_csv(
        record.thresholds, out_dir / "thresholds.csv", record.fingerprint
    )
    paths["summary"] = write_run_summary(record, out_dir / "run_summary.csv")
    config_path = out_dir / "config.json"
    config_path.write_text(json.dumps(record.config, indent=2, sort_keys=True, default=str) + "\n")
    paths["config"] = config_path
    if record.reports:
        paths["fig_blocks"] = plot_block_means(record, out_dir / "dice_blocks.png")
        block = "estimated_mf" if "estimated_mf" in record.reports else sorted(record.reports)[0]
        ages = {r.record.subject_id: r.record.age for r in test_results}
        pairs = [
            (ages[sid], f)
            for sid, _, f in record.reports[block].per_subject
            if sid in ages and math.isfinite(ages[sid]) and math.isfinite(f)
        ]
        paths["fig_fpr_age"] = plot_fpr_vs_age(
            pairs, out_dir / "fpr_vs_age.png", title=f"{record.method} ({block})"
        )
    return paths
