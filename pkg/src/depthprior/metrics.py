"""Depth, disparity, image and point-cloud evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .fusion import PointCloud
from .imaging import DepthMap


def _masked(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mask = np.ones(a.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ValueError("mask shape does not match rasters")
    return a[mask], b[mask]


def rmse(d_out, d_gt, mask=None) -> float:
    """Root-mean-square error over mask-true pixels (0 for an empty mask)."""
    a, b = _masked(d_out, d_gt, mask)
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.mean((a - b) ** 2)))


def nearest_fill(depth: DepthMap) -> DepthMap:
    """Baseline completion: each hole takes the value of the closest valid pixel (Euclidean)."""
    if not depth.valid.any():
        raise ValueError("cannot fill a depth map without valid pixels")
    _, (iy, ix) = ndimage.distance_transform_edt(~depth.valid, return_indices=True)
    return DepthMap(depth.data[iy, ix])


def d1_error(pred, gt, mask=None, mode: str = "and", abs_threshold: float = 3.0, rel_threshold: float = 0.05) -> float:
    """Percentage of disparity outliers.

    ``mode="and"`` flags a pixel when the error exceeds both ``abs_threshold``
    pixels and ``rel_threshold`` of the true disparity (KITTI devkit);
    ``mode="or"`` flags it when either is exceeded.
    """
    a, b = _masked(pred, gt, mask)
    if a.size == 0:
        return 0.0
    err = np.abs(a - b)
    over_abs = err > abs_threshold
    over_rel = err > rel_threshold * np.abs(b)
    if mode == "and":
        outlier = over_abs & over_rel
    elif mode == "or":
        outlier = over_abs | over_rel
    else:
        raise ValueError(f"unknown D1 mode {mode!r}")
    return 100.0 * float(outlier.mean())


def psnr(a, b, max_value: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    a = a.data if hasattr(a, "data") else a
    b = b.data if hasattr(b, "data") else b
    x, y = _masked(a, b, None)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(max_value / math.sqrt(mse))


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def prf_score(reconstruction: PointCloud, ground_truth: PointCloud, tau: float) -> tuple[float, float, float]:
    """Precision, recall and f-score (fractions in [0, 1]) at distance ``tau``.

    Point-to-point nearest neighbours; an empty side yields 0 for the
    quantities that depend on it.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    rec = np.asarray(reconstruction.points, dtype=np.float64)
    gt = np.asarray(ground_truth.points, dtype=np.float64)
    if len(rec) == 0 or len(gt) == 0:
        return 0.0, 0.0, 0.0
    d_rec, _ = cKDTree(gt).query(rec, k=1)
    d_gt, _ = cKDTree(rec).query(gt, k=1)
    precision = float(np.mean(d_rec <= tau))
    recall = float(np.mean(d_gt <= tau))
    return precision, recall, f_score(precision, recall)


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricRow:
    name: str
    metric: str
    value: float


def format_value(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def write_report(rows: list[MetricRow], csv_path, text_path=None) -> None:
    with open(csv_path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["name", "metric", "value"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**asdict(row), "value": format_value(row.value)})
    if text_path is not None:
        width = max((len(r.name) for r in rows), default=4)
        with open(text_path, "w") as f:
            for row in rows:
                f.write(f"{row.name:<{width}}  {row.metric:<10} {format_value(row.value)}\n")
