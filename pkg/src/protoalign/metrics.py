"""Dice, average surface distance, 2-D feature projection and report files."""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

METRIC_COLUMNS = ("epoch", "split", "class", "dice", "asd")


@dataclass(frozen=True)
class ClassMetrics:
    class_id: int
    dice: float | None
    asd: float | None


@dataclass(frozen=True)
class MetricRecord:
    epoch: int
    split: str
    metrics: ClassMetrics


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float | None:
    """2|A n B| / (|A| + |B|); None when both masks are empty."""
    a, b = _pair(pred, gt)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return None
    return 2.0 * int((a & b).sum()) / total


def boundary(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (or the frame)."""
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


def asd(pred, gt) -> float | None:
    """Symmetric average surface distance in pixels; None if either boundary is empty."""
    a, b = _pair(pred, gt)
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        return None
    to_b = ndimage.distance_transform_edt(~bb)
    to_a = ndimage.distance_transform_edt(~ba)
    return 0.5 * (float(to_b[ba].mean()) + float(to_a[bb].mean()))


def class_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray, classes: Iterable[int]) -> list[ClassMetrics]:
    return [ClassMetrics(c, dice(pred_labels == c, gt_labels == c), asd(pred_labels == c, gt_labels == c)) for c in classes]


def mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def summarize(per_sample: Sequence[Sequence[ClassMetrics]], classes: Iterable[int]) -> list[ClassMetrics]:
    """Per-class means over samples, skipping undefined cells."""
    out = []
    for c in classes:
        cells = [m for sample in per_sample for m in sample if m.class_id == c]
        out.append(ClassMetrics(c, mean_defined(m.dice for m in cells), mean_defined(m.asd for m in cells)))
    return out


def project_features_2d(embeddings, labels=None) -> np.ndarray:
    """Top-2 principal-component coordinates of mean-centred vectors.

    Each component is signed so that its largest-magnitude loading is
    positive. Zero-variance input maps to all-zero points.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ValueError("need at least 3 vectors for a 2-D projection")
    if np.ptp(x, axis=0).max() == 0:
        return np.zeros((len(x), 2))
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order]
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    for j in range(comps.shape[1]):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def emit_report(
    records: Sequence[MetricRecord],
    loss_history: Sequence[Mapping[str, float]] = (),
    out_dir: str | os.PathLike = ".",
    projection: tuple[np.ndarray, np.ndarray] | None = None,
) -> Path:
    """Write ``metrics.csv``, ``losses.svg`` and ``features.svg`` into ``out_dir``.

    Each (epoch, split) group gets a trailing ``avg`` row holding the mean
    of its defined cells.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    groups: dict[tuple[int, str], list[ClassMetrics]] = defaultdict(list)
    for r in records:
        groups[(r.epoch, r.split)].append(r.metrics)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for (epoch, split), cells in groups.items():
            for m in cells:
                w.writerow([epoch, split, m.class_id, _fmt(m.dice), _fmt(m.asd)])
            w.writerow(
                [epoch, split, "avg", _fmt(mean_defined(m.dice for m in cells)), _fmt(mean_defined(m.asd for m in cells))]
            )
    _plot_losses(loss_history, out / "losses.svg")
    _plot_features(projection, out / "features.svg")
    return out / "metrics.csv"


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append(
                {
                    "epoch": int(row["epoch"]),
                    "split": row["split"],
                    "class": row["class"] if row["class"] == "avg" else int(row["class"]),
                    "dice": float(row["dice"]) if row["dice"] else None,
                    "asd": float(row["asd"]) if row["asd"] else None,
                }
            )
    return rows


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "protoalign"
    return plt


def _plot_losses(history: Sequence[Mapping[str, float]], path: Path) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(6, 4))
    keys = [k for k in ("total", "seg", "cycle", "adv_img", "adv_seg", "sim", "cl", "d_loss") if history and k in history[0]]
    for k in keys:
        vals = [h[k] for h in history]
        if all(isinstance(v, (int, float)) and math.isfinite(v) for v in vals):
            ax.plot(range(len(vals)), vals, label=k, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    if keys:
        ax.legend(fontsize=7)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _plot_features(projection, path: Path) -> None:
    plt = _figure()
    fig, ax = plt.subplots(figsize=(5, 5))
    if projection is not None:
        points, labels = projection
        labels = np.asarray(labels)
        for c in np.unique(labels):
            sel = labels == c
            ax.scatter(points[sel, 0], points[sel, 1], s=6, label=str(c))
        ax.legend(fontsize=7, title="class")
    ax.set_title("PCA projection of foreground features")
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
