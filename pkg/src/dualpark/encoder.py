"""Sensor input to BEV features, then slot-query attention fusion.

Two input modes share everything downstream of the raw BEV grid:

* ``cameras``: a small strided conv backbone per camera predicts image
  features and a per-pixel depth distribution; features are lifted along
  each pixel ray at the depth-bin centres and splatted (sum pooled) into the
  nearest BEV cell by a constant sparse matrix.
* ``direct-bev``: rendered occupancy grids go through a 3x3 conv stem.

The slot query map and the raw BEV are each reduced by the same number of
stride-2 convs to a token grid; query tokens self-attend, then cross-attend
to BEV tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .autodiff import Conv2d, FeedForward, LayerNorm, Module, MultiHeadAttention, Tensor, ops
from .camera import CameraRig, RigError
from .maps import GridSpec, binary_query, gaussian_query

MODES = ("direct-bev", "cameras")
QUERY_KINDS = ("gaussian", "binary")


@dataclass(frozen=True)
class EncoderConfig:
    mode: str = "direct-bev"
    in_channels: int = 2  # occupancy channels in direct-bev mode
    bev_channels: int = 16
    depth_bins: int = 16
    depth_min: float = 0.5
    depth_max: float = 12.0
    image_size: int = 64
    query: str = "gaussian"
    query_sigma: float = 5.0  # cells
    binary_half_extent: int = 6  # cells
    downsample: int = 3  # stride-2 convs between a full-resolution map and its token grid
    layers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown input mode {self.mode!r}; expected one of {MODES}")
        if self.query not in QUERY_KINDS:
            raise ValueError(f"unknown query kind {self.query!r}; expected one of {QUERY_KINDS}")
        if not 0 < self.depth_min < self.depth_max:
            raise ValueError("need 0 < depth_min < depth_max")
        if self.depth_bins < 1 or self.downsample < 1 or self.layers < 1:
            raise ValueError("depth_bins, downsample and layers must be positive")

    def depth_centers(self) -> np.ndarray:
        edges = np.linspace(self.depth_min, self.depth_max, self.depth_bins + 1)
        return (edges[:-1] + edges[1:]) / 2


@dataclass
class EncoderOutput:
    fused: Tensor  # (B, tokens, d)
    bev: Tensor  # (B, C, H, W) raw grid before fusion
    bev_tokens: Tensor  # (B, tokens, d)


def token_side(cells: int, downsample: int) -> int:
    for _ in range(downsample):
        cells = (cells - 1) // 2 + 1
    return cells


def query_map(slot_xy, grid: GridSpec, cfg: EncoderConfig) -> np.ndarray:
    """Slot query (H, W) for a metric slot position in the current ego frame."""
    center = grid.metric_to_pixel(*slot_xy)
    if cfg.query == "gaussian":
        return gaussian_query(center, cfg.query_sigma, grid).values
    return binary_query(center, cfg.binary_half_extent, grid).values


# -- lift / splat ------------------------------------------------------------------

def feature_cameras(rig: CameraRig, feat_h: int, feat_w: int) -> list:
    rig.validate()
    return [cam.scaled(feat_w, feat_h) for cam in rig.cameras]


def splat_indices(rig: CameraRig, feat_h: int, feat_w: int, depths: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Flat BEV cell of every (camera, pixel, depth bin) point, -1 when off-grid.

    Shape (n_cam, feat_h * feat_w, D). Points are placed at camera-frame depth
    ``z = depth`` along each pixel-centre ray and dropped onto the ground plane.
    """
    out = np.empty((len(rig), feat_h * feat_w, len(depths)), dtype=np.int64)
    for k, cam in enumerate(feature_cameras(rig, feat_h, feat_w)):
        rays = cam.pixel_rays().reshape(-1, 3)
        pts = rays[:, None, :] * depths[None, :, None]
        ego = pts @ cam.rotation.T + cam.translation
        row, col = grid.metric_to_pixel(ego[..., 0], ego[..., 1])
        ri = np.floor(row + 0.5).astype(np.int64)
        ci = np.floor(col + 0.5).astype(np.int64)
        inside = (ri >= 0) & (ri < grid.height) & (ci >= 0) & (ci < grid.width)
        out[k] = np.where(inside, ri * grid.width + ci, -1)
    return out


def splat_matrix(indices: np.ndarray, grid: GridSpec) -> sp.csr_matrix:
    """(H*W, n_points) 0/1 matrix summing point contributions per cell."""
    flat = indices.reshape(-1)
    cols = np.nonzero(flat >= 0)[0]
    data = np.ones(len(cols))
    return sp.csr_matrix((data, (flat[cols], cols)), shape=(grid.height * grid.width, flat.size))


def lift_splat(features, depth_logits, matrix: sp.csr_matrix, grid: GridSpec) -> Tensor:
    """Sum-pool ``feature x depth probability`` of every lifted point into the BEV.

    ``features`` is (B, n_cam, C, h, w), ``depth_logits`` is (B, n_cam, D, h, w);
    ``matrix`` comes from :func:`splat_matrix` for the same camera layout.
    Returns (B, C, H, W).
    """
    features, depth_logits = ops.as_tensor(features), ops.as_tensor(depth_logits)
    b, n, c, h, w = features.shape
    d = depth_logits.shape[2]
    if depth_logits.shape != (b, n, d, h, w):
        raise ValueError(f"depth logits {depth_logits.shape} do not match features {features.shape}")
    if matrix.shape[1] != n * h * w * d:
        raise ValueError("splat matrix was built for a different camera/feature layout")
    prob = ops.softmax(depth_logits, axis=2)
    f = features.reshape(b, n, c, h * w, 1)
    p = prob.reshape(b, n, 1, d, h * w).transpose(0, 1, 2, 4, 3)
    lifted = (f * p).transpose(0, 2, 1, 3, 4).reshape(b, c, n * h * w * d)
    return ops.sparse_matmul(matrix, lifted).reshape(b, c, grid.height, grid.width)


class ImageBackbone(Module):
    """Three stride-2 conv blocks, then 1x1 heads for features and depth logits."""

    def __init__(self, feat_channels: int, depth_bins: int, rng: np.random.Generator):
        self.blocks = [Conv2d(3, 16, 3, rng, stride=2, padding=1),
                       Conv2d(16, 32, 3, rng, stride=2, padding=1),
                       Conv2d(32, 32, 3, rng, stride=2, padding=1)]
        self.feat = Conv2d(32, feat_channels, 1, rng)
        self.depth = Conv2d(32, depth_bins, 1, rng)

    def __call__(self, images) -> tuple[Tensor, Tensor]:
        """``images`` (B, n_cam, 3, h, w) -> features (B, n, C, h/8, w/8), depth logits (B, n, D, ...)."""
        images = ops.as_tensor(images)
        b, n = images.shape[:2]
        x = images.reshape(b * n, *images.shape[2:])
        for conv in self.blocks:
            x = ops.relu(conv(x))
        f, dl = self.feat(x), self.depth(x)
        return (f.reshape(b, n, *f.shape[1:]), dl.reshape(b, n, *dl.shape[1:]))


class Downsampler(Module):
    """``steps`` stride-2 3x3 convs from ``c_in`` channels to width ``dim``, as tokens."""

    def __init__(self, c_in: int, dim: int, steps: int, rng: np.random.Generator):
        widths = [c_in] + [max(8, dim // 2 ** (steps - 1 - k)) for k in range(steps - 1)] + [dim]
        self.convs = [Conv2d(widths[k], widths[k + 1], 3, rng, stride=2, padding=1) for k in range(steps)]

    def __call__(self, x) -> Tensor:
        for k, conv in enumerate(self.convs):
            x = conv(x)
            if k < len(self.convs) - 1:
                x = ops.relu(x)
        b, d, h, w = x.shape
        return x.reshape(b, d, h * w).transpose(0, 2, 1)


class FusionLayer(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, hidden, rng)
        self.norm3 = LayerNorm(dim)

    def __call__(self, q, memory) -> Tensor:
        q = self.norm1(q + self.self_attn(q))
        q = self.norm2(q + self.cross_attn(q, memory))
        return self.norm3(q + self.ffn(q))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, grid: GridSpec, dim: int, heads: int, hidden: int,
                 rng: np.random.Generator, rig: CameraRig | None = None):
        self.cfg = cfg
        self.grid = grid
        n_tok = token_side(grid.height, cfg.downsample) * token_side(grid.width, cfg.downsample)
        if cfg.mode == "cameras":
            if rig is None:
                raise RigError("camera mode needs a camera rig")
            rig.validate()
            self.rig = rig
            self.backbone = ImageBackbone(cfg.bev_channels, cfg.depth_bins, rng)
            h, w = rig.image_size
            fh, fw = token_side(h, 3), token_side(w, 3)
            self._splat = splat_matrix(splat_indices(rig, fh, fw, cfg.depth_centers(), grid), grid)
        else:
            self.rig = None
            self.stem = Conv2d(cfg.in_channels, cfg.bev_channels, 3, rng, padding=1)
        self.query_net = Downsampler(1, dim, cfg.downsample, rng)
        self.bev_net = Downsampler(cfg.bev_channels, dim, cfg.downsample, rng)
        self.query_pos = Tensor(rng.normal(0.0, 0.1, size=(n_tok, dim)), requires_grad=True)
        self.bev_pos = Tensor(rng.normal(0.0, 0.1, size=(n_tok, dim)), requires_grad=True)
        self.layers = [FusionLayer(dim, heads, hidden, rng) for _ in range(cfg.layers)]

    def raw_bev(self, sensor) -> Tensor:
        sensor = np.asarray(sensor, dtype=np.float64)
        # relu would silently map NaN to zero
        if not np.isfinite(sensor).all():
            raise ValueError("sensor input contains non-finite values")
        if self.cfg.mode == "cameras":
            h, w = self.rig.image_size
            if sensor.ndim != 5 or sensor.shape[1:] != (len(self.rig), 3, h, w):
                raise ValueError(f"camera input {sensor.shape} does not match rig "
                                 f"({len(self.rig)} cameras of {h}x{w})")
            feats, depth = self.backbone(sensor)
            return lift_splat(feats, depth, self._splat, self.grid)
        expect = (self.cfg.in_channels, *self.grid.shape)
        if sensor.ndim != 4 or sensor.shape[1:] != expect:
            raise ValueError(f"BEV input {sensor.shape} does not match (B, {expect})")
        return ops.relu(self.stem(sensor))

    def __call__(self, sensor, query) -> EncoderOutput:
        """``query`` is (B, H, W) on the BEV grid."""
        query = np.asarray(query, dtype=np.float64)
        if query.shape[1:] != self.grid.shape:
            raise ValueError(f"query map {query.shape[1:]} does not match BEV grid {self.grid.shape}")
        bev = self.raw_bev(sensor)
        bev_tok = self.bev_net(bev) + self.bev_pos
        q = self.query_net(query[:, None]) + self.query_pos
        for layer in self.layers:
            q = layer(q, bev_tok)
        return EncoderOutput(q, bev, bev_tok)
