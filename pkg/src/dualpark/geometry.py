"""Small planar-geometry helpers shared by data generation, training and control."""
from __future__ import annotations

import math

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def to_local(points: np.ndarray, pose) -> np.ndarray:
    """Express (N, 2) world points in the frame of ``pose = (x, y, heading)``."""
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    d = np.asarray(points, dtype=np.float64) - np.array([x, y])
    return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)


def to_world(points: np.ndarray, pose) -> np.ndarray:
    x, y, th = pose
    c, s = math.cos(th), math.sin(th)
    p = np.asarray(points, dtype=np.float64)
    return np.stack([c * p[..., 0] - s * p[..., 1] + x, s * p[..., 0] + c * p[..., 1] + y], axis=-1)


def future_window(n_points: int, current: int, horizon: int) -> list[int]:
    """Indices min(current + b, n - 1) for b = 1..horizon (0-based ``current``)."""
    if n_points < 1:
        raise ValueError("empty trajectory")
    return [min(current + b, n_points - 1) for b in range(1, horizon + 1)]


def rectangle_corners(cx: float, cy: float, heading: float, length: float, width: float) -> np.ndarray:
    """(4, 2) corners of an oriented rectangle, counter-clockwise."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = length / 2, width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + np.array([cx, cy])


def point_rectangle_distance(points: np.ndarray, cx, cy, heading, length, width) -> np.ndarray:
    """Euclidean distance from each point to an oriented rectangle (0 inside)."""
    local = to_local(np.asarray(points, dtype=np.float64), (cx, cy, heading))
    dx = np.maximum(np.abs(local[..., 0]) - length / 2, 0.0)
    dy = np.maximum(np.abs(local[..., 1]) - width / 2, 0.0)
    return np.hypot(dx, dy)
