"""Weight maps over the BEV plane.

Pixel convention, used everywhere in the package: pixel ``(i, j)`` is
(row, column); rows run from +y downwards, columns from -x rightwards, and
coordinates refer to cell centres. So row 0 is the cell band nearest
``y = +range_y`` and column 0 the band nearest ``x = -range_x``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor
from .geometry import future_window


@dataclass(frozen=True)
class GridSpec:
    height: int = 100
    width: int = 100
    range_x: float = 10.0
    range_y: float = 10.0
    resolution: float = 0.2

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("grid must have at least one cell")
        if abs(self.height * self.resolution - 2 * self.range_y) > self.resolution + 1e-9:
            raise ValueError("height * resolution must cover 2 * range_y")
        if abs(self.width * self.resolution - 2 * self.range_x) > self.resolution + 1e-9:
            raise ValueError("width * resolution must cover 2 * range_x")

    @classmethod
    def square(cls, cells: int, half_range: float) -> "GridSpec":
        return cls(cells, cells, half_range, half_range, 2 * half_range / cells)

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def metric_to_pixel(self, x, y):
        """Fractional (row, col) of metric ego-frame point(s)."""
        row = (self.range_y - np.asarray(y, dtype=np.float64)) / self.resolution - 0.5
        col = (np.asarray(x, dtype=np.float64) + self.range_x) / self.resolution - 0.5
        return row, col

    def pixel_to_metric(self, row, col):
        x = -self.range_x + (np.asarray(col, dtype=np.float64) + 0.5) * self.resolution
        y = self.range_y - (np.asarray(row, dtype=np.float64) + 0.5) * self.resolution
        return x, y

    def nearest_cell(self, x, y):
        """Integer (row, col) of the cell containing the point, or None when off-grid."""
        row = int(np.floor((self.range_y - y) / self.resolution))
        col = int(np.floor((x + self.range_x) / self.resolution))
        if 0 <= row < self.height and 0 <= col < self.width:
            return row, col
        return None

    def contains(self, x, y) -> bool:
        return abs(x) <= self.range_x and abs(y) <= self.range_y

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(H, W) arrays of metric x and y at every cell centre."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return self.pixel_to_metric(rows, cols)


@dataclass
class WeightMap:
    grid: GridSpec
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.values.shape != self.grid.shape:
            raise ValueError(f"map shape {self.values.shape} != grid {self.grid.shape}")

    def argmax(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)

    def to_pgm(self, path) -> None:
        write_pgm(path, self.values)


def _check_sigma(sigma: float) -> None:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


def _sq_dist(center, grid: GridSpec) -> np.ndarray:
    rows = np.arange(grid.height, dtype=np.float64)[:, None]
    cols = np.arange(grid.width, dtype=np.float64)[None, :]
    return (rows - center[0]) ** 2 + (cols - center[1]) ** 2


def gaussian_query(center, sigma: float, grid: GridSpec) -> WeightMap:
    """Unnormalised Gaussian with value 1 at an on-grid ``center`` (row, col)."""
    _check_sigma(sigma)
    return WeightMap(grid, np.exp(-_sq_dist(center, grid) / (2 * sigma**2)), normalized=False)


def gaussian_normalized(center, sigma: float, grid: GridSpec) -> WeightMap:
    """Gaussian divided by its grid-wide sum."""
    _check_sigma(sigma)
    logits = -_sq_dist(center, grid) / (2 * sigma**2)
    e = np.exp(logits - logits.max())
    return WeightMap(grid, e / e.sum(), normalized=True)


def binary_query(center, half_extent: int, grid: GridSpec) -> WeightMap:
    """1 inside the square window of ``half_extent`` cells around the nearest cell to ``center``."""
    if half_extent < 0:
        raise ValueError("half_extent must be non-negative")
    r0 = int(np.floor(center[0] + 0.5))
    c0 = int(np.floor(center[1] + 0.5))
    values = np.zeros(grid.shape)
    r_lo, r_hi = max(r0 - half_extent, 0), min(r0 + half_extent + 1, grid.height)
    c_lo, c_hi = max(c0 - half_extent, 0), min(c0 + half_extent + 1, grid.width)
    if r_lo < r_hi and c_lo < c_hi:
        values[r_lo:r_hi, c_lo:c_hi] = 1.0
    return WeightMap(grid, values, normalized=False)


def clamped_pixel(x: float, y: float, grid: GridSpec) -> tuple[float, float]:
    """Fractional pixel of a metric point, clamped onto the grid's border cells."""
    row, col = grid.metric_to_pixel(x, y)
    return float(np.clip(row, 0, grid.height - 1)), float(np.clip(col, 0, grid.width - 1))


def ground_truth_maps(traj_x, traj_y, sigma: float, grid: GridSpec,
                      horizon: int | None = None, current: int = 0) -> list[WeightMap]:
    """Normalised supervision maps for future points of a trajectory.

    Without ``horizon`` there is one map per point. With it, the maps follow
    the sliding window ``min(current + b, N - 1)`` for ``b = 1..horizon``.
    """
    xs = np.asarray(traj_x, dtype=np.float64)
    ys = np.asarray(traj_y, dtype=np.float64)
    if xs.size == 0 or xs.shape != ys.shape:
        raise ValueError("need a non-empty trajectory with matching x and y")
    idx = range(xs.size) if horizon is None else future_window(xs.size, current, horizon)
    return [gaussian_normalized(clamped_pixel(xs[k], ys[k], grid), sigma, grid) for k in idx]


def gaussian_map_tensor(center: Tensor, sigma: float, grid: GridSpec) -> tuple[Tensor, Tensor]:
    """Differentiable normalised Gaussian maps.

    ``center`` has shape (..., 2) holding fractional (row, col). Returns
    ``(map, log_map)`` each of shape (..., H, W). The normalised isotropic
    Gaussian factorises into row and column softmaxes, which is what is
    evaluated here.
    """
    _check_sigma(sigma)
    rows = np.arange(grid.height, dtype=np.float64)
    cols = np.arange(grid.width, dtype=np.float64)
    scale = -1.0 / (2 * sigma**2)
    pr = center[..., 0:1]
    pc = center[..., 1:2]
    log_r = ops.log_softmax(((rows - pr) ** 2) * scale, axis=-1)
    log_c = ops.log_softmax(((cols - pc) ** 2) * scale, axis=-1)
    lead = center.shape[:-1]
    log_map = log_r.reshape(*lead, grid.height, 1) + log_c.reshape(*lead, 1, grid.width)
    return ops.exp(log_map), log_map


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM, linearly scaled so the maximum maps to 255."""
    from PIL import Image

    v = np.asarray(values, dtype=np.float64)
    peak = v.max()
    scaled = np.zeros_like(v) if peak <= 0 else v / peak
    img = Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L")
    img.save(Path(path), format="PPM")
