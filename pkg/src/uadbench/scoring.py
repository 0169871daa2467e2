"""Anomaly-map post-processing, thresholding and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import rank_filter

from .errors import ConfigError


@dataclass
class ThresholdRecord:
    """A fitted binarization threshold and how it was obtained.

    ``kind`` is "estimated" (fit on validation) or "optimal" (fit on test);
    reporting both exposes the gap between attainable and realized Dice.
    """

    method: str
    modality: str
    tau: float
    kind: str
    fitted_on: str
    grid: str
    mean_dice: float = float("nan")

    def __post_init__(self):
        if self.kind not in ("estimated", "optimal"):
            raise ConfigError(f"threshold kind must be estimated|optimal, got {self.kind!r}")


@dataclass
class MetricReport:
    """Per-subject Dice/FPR rows plus the dataset-level AUPRC."""

    per_subject: list[tuple[str, float, float]]
    dataset_auprc: float
    threshold: ThresholdRecord
    filtered: bool

    def mean_dice(self) -> float:
        vals = [d for _, d, _ in self.per_subject if np.isfinite(d)]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_fpr(self) -> float:
        vals = [f for _, _, f in self.per_subject if np.isfinite(f)]
        return float(np.mean(vals)) if vals else float("nan")


def median_filter3d(volume: np.ndarray, kernel: int) -> np.ndarray:
    """Median filter with a kernel³ window and edge replication.

    An even kernel anchors the window at offsets [-kernel/2, kernel/2 - 1]
    per axis, and the median of an even-sized window is the lower middle
    order statistic, so outputs are bit-reproducible.
    """
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ConfigError(f"expected a 3D array, got ndim={volume.ndim}")
    kernel = int(kernel)
    if kernel < 1:
        raise ConfigError(f"kernel must be >= 1, got {kernel}")
    if kernel == 1:
        return volume.copy()
    m = kernel**3
    # rank_filter with size=k centers even windows on [-k/2, k/2-1] and
    # mode="nearest" replicates edges; rank (m-1)//2 is the lower middle.
    return rank_filter(volume, rank=(m - 1) // 2, size=kernel, mode="nearest")


def dice(pred: np.ndarray, truth: np.ndarray) -> float:
    """Dice overlap of two binary masks; two empty masks score 1.0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    denom = int(pred.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, truth).sum()) / denom


def fpr(pred: np.ndarray, brain_mask: np.ndarray) -> float:
    """Fraction of brain-mask voxels flagged positive."""
    pred = np.asarray(pred, dtype=bool)
    brain_mask = np.asarray(brain_mask, dtype=bool)
    if pred.shape != brain_mask.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {brain_mask.shape}")
    n_brain = int(brain_mask.sum())
    if n_brain == 0:
        raise ConfigError("empty brain mask: false positive rate undefined")
    return int(np.logical_and(pred, brain_mask).sum()) / n_brain


def auprc(scored: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Average precision over all voxels pooled across subjects.

    Operating points walk the unique scores in descending order (equal
    scores collapse into one point); the area is the sum of
    delta-recall times precision at each point.
    """
    if not scored:
        raise ConfigError("auprc needs at least one subject")
    score_parts = []
    label_parts = []
    for amap, truth in scored:
        amap = np.asarray(amap, dtype=np.float64)
        truth = np.asarray(truth, dtype=bool)
        if amap.shape != truth.shape:
            raise ConfigError(f"shape mismatch: {amap.shape} vs {truth.shape}")
        score_parts.append(amap.ravel())
        label_parts.append(truth.ravel())
    scores = np.concatenate(score_parts)
    labels = np.concatenate(label_parts)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ConfigError("no positive voxels pooled: recall undefined")

    order = np.argsort(scores, kind="stable")[::-1]
    scores = scores[order]
    labels = labels[order]
    # Prefix counts at the last index of each tied-score block.
    tp = np.cumsum(labels)
    fp = np.cumsum(~labels)
    block_end = np.nonzero(np.diff(scores))[0]
    block_end = np.append(block_end, scores.size - 1)
    tp = tp[block_end].astype(np.float64)
    fp = fp[block_end].astype(np.float64)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def quantile_grid(val_maps: list[np.ndarray], n_points: int = 200) -> np.ndarray:
    """Candidate thresholds at evenly spaced quantiles of pooled scores."""
    if not val_maps:
        raise ConfigError("cannot build a threshold grid from no maps")
    pooled = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in val_maps])
    qs = np.linspace(0.0, 1.0, int(n_points))
    return np.unique(np.quantile(pooled, qs))


def _fit(scored, grid, method, modality, kind, fitted_on) -> ThresholdRecord:
    if len(grid) == 0:
        raise ConfigError("threshold grid is empty")
    if not scored:
        raise ConfigError("no subjects to fit a threshold on")
    grid = np.asarray(grid, dtype=np.float64)
    best_tau = None
    best_dice = -1.0
    for tau in grid:
        per = [dice(np.asarray(amap) > tau, truth) for amap, truth in scored]
        mean_d = float(np.mean(per))
        # Strict > keeps the smallest tau on ties (grid scanned ascending).
        if mean_d > best_dice:
            best_dice = mean_d
            best_tau = float(tau)
    return ThresholdRecord(
        method=method,
        modality=modality,
        tau=best_tau,
        kind=kind,
        fitted_on=fitted_on,
        grid=f"{grid.size} points in [{grid.min():.6g}, {grid.max():.6g}]",
        mean_dice=best_dice,
    )


def fit_threshold(
    val_maps: list[tuple[np.ndarray, np.ndarray]],
    grid: np.ndarray,
    method: str = "",
    modality: str = "synthetic",
    fitted_on: str = "validation",
) -> ThresholdRecord:
    """Pick the grid threshold maximizing mean per-subject Dice (ties: smallest).

    Callers must pass UNFILTERED validation maps; the chosen threshold is
    then transferred unchanged to filtered test maps.
    """
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    return _fit(val_maps, grid, method, modality, "estimated", fitted_on)


def optimal_threshold(
    test_maps: list[tuple[np.ndarray, np.ndarray]],
    grid: np.ndarray,
    method: str = "",
    modality: str = "synthetic",
    fitted_on: str = "test",
) -> ThresholdRecord:
    """Best attainable grid threshold on the evaluation set itself."""
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    return _fit(test_maps, grid, method, modality, "optimal", fitted_on)
