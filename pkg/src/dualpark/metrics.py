"""Trajectory comparison metrics: L2, Hausdorff and Fourier-descriptor difference.

Conventions (applied identically to every method compared):

* L2: both trajectories are resampled to ``K`` points equally spaced in arc
  length, then the mean pointwise Euclidean distance is reported.
* Hausdorff: symmetric Hausdorff distance over the raw points.
* Fourier: resample to 64 points, form ``z = x + i y``, take the DFT and keep
  the magnitudes of the first 16 coefficients; report the Euclidean norm of
  the descriptor difference.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

RESAMPLE_POINTS = 64
FOURIER_COEFFS = 16


@dataclass(frozen=True)
class MetricReport:
    l2: float
    hausdorff: float
    fourier_diff: float


def _points(traj) -> np.ndarray:
    pts = np.asarray(getattr(traj, "xy", traj), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] < 2 or len(pts) == 0:
        raise ValueError("trajectory must be a non-empty (N, 2) array of points")
    return pts[:, :2]


def resample(traj, k: int = RESAMPLE_POINTS) -> np.ndarray:
    """``k`` points equally spaced in arc length along the polyline."""
    pts = _points(traj)
    if len(pts) == 1:
        return np.repeat(pts, k, axis=0)
    seg = np.sqrt((pts[1:, 0] - pts[:-1, 0]) ** 2 + (pts[1:, 1] - pts[:-1, 1]) ** 2)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total == 0:
        return np.repeat(pts[:1], k, axis=0)
    targets = total * np.arange(k) / (k - 1)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(pts) - 2)
    # zero-length segments cannot be interpolated; move to the next real one
    seg_len = cum[idx + 1] - cum[idx]
    frac = np.where(seg_len > 0, (targets - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    return pts[idx] + frac[:, None] * (pts[idx + 1] - pts[idx])


def l2_distance(pred, gt, k: int = RESAMPLE_POINTS) -> float:
    a, b = resample(pred, k), resample(gt, k)
    d = np.sqrt((a[:, 0] - b[:, 0]) ** 2 + (a[:, 1] - b[:, 1]) ** 2)
    return math.fsum(d.tolist()) / k


def hausdorff(pred, gt) -> float:
    a, b = _points(pred), _points(gt)
    d = np.sqrt((a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def fourier_descriptor(traj, k: int = RESAMPLE_POINTS, n_coeffs: int = FOURIER_COEFFS) -> np.ndarray:
    pts = resample(traj, k)
    return np.abs(np.fft.fft(pts[:, 0] + 1j * pts[:, 1]))[:n_coeffs]


def fourier_diff(pred, gt) -> float:
    return float(np.linalg.norm(fourier_descriptor(pred) - fourier_descriptor(gt)))


def evaluate(pred, gt) -> MetricReport:
    return MetricReport(l2_distance(pred, gt), hausdorff(pred, gt), fourier_diff(pred, gt))


def mean_report(reports) -> MetricReport:
    reports = list(reports)
    if not reports:
        raise ValueError("no trajectories to average")
    return MetricReport(*(float(np.mean([getattr(r, f) for r in reports]))
                          for f in ("l2", "hausdorff", "fourier_diff")))


def read_points_csv(path) -> np.ndarray:
    """(N, 2) x, y columns of a trajectory CSV with a header row."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["x"]), float(r["y"])] for r in rows]).reshape(-1, 2)


def evaluate_directories(pred_dir, gt_dir, out_csv) -> MetricReport:
    """Compare every ``<id>/points.csv`` present in both directories; writes per-id rows and a mean row."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    ids = sorted(p.parent.name for p in pred_dir.glob("*/points.csv")
                 if (gt_dir / p.parent.name / "points.csv").exists())
    if not ids:
        raise ValueError(f"no common trajectories between {pred_dir} and {gt_dir}")
    rows = []
    for tid in ids:
        rep = evaluate(read_points_csv(pred_dir / tid / "points.csv"),
                       read_points_csv(gt_dir / tid / "points.csv"))
        rows.append((tid, rep))
    avg = mean_report(r for _, r in rows)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trajectory_id", "l2", "hausdorff", "fourier_diff"])
        for tid, r in rows + [("mean", avg)]:
            w.writerow([tid, f"{r.l2:.9g}", f"{r.hausdorff:.9g}", f"{r.fourier_diff:.9g}"])
    return avg
