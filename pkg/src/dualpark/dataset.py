"""Trajectory records, the per-step sample reorganisation, and on-disk storage.

A record holds one expert manoeuvre in the t0 ego frame plus a frame source
giving the sensor input at each waypoint. ``reorganize`` turns records into
one sample per (trajectory, step): sensor data at pose ``j``, the slot and the
next ``Q`` waypoints (window ``min(j + b, N - 1)``) expressed in the ego frame
at pose ``j``.

Disk layout (see ``docs/formats.md``)::

    <root>/manifest.json      count, seed, mode, grid, synth settings
    <root>/rig.json           camera rig (camera mode only)
    <root>/<id>/meta.json     id, seed, scenario, slot centre, mode, n_points
    <root>/<id>/points.csv    t, x, y, heading (t0 frame)
    <root>/<id>/bev.bin       direct-bev mode: header + float32 (N, C, H, W)
    <root>/<id>/images/cam<k>_<j>.png   camera mode
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .camera import CameraRig
from .geometry import future_window, to_local
from .maps import GridSpec, ground_truth_maps
from .synth import Scenario, SynthConfig, plan_expert, random_scenario, render_bev, render_scene

EXPERT_SPEED = 1.0  # m/s, sets record timestamps
BEV_MAGIC = b"DPBEV\x00\x01\x00"


class DataError(ValueError):
    pass


# -- frame sources -----------------------------------------------------------------

class RenderedFrames:
    """Renders the sensor input for waypoint ``j`` on request."""

    def __init__(self, scenario: Scenario, waypoints: np.ndarray, mode: str,
                 grid: GridSpec | None = None, rig: CameraRig | None = None):
        if mode == "direct-bev" and grid is None:
            raise DataError("direct-bev frames need a grid")
        if mode == "cameras" and rig is None:
            raise DataError("camera frames need a rig")
        self.scenario, self.waypoints, self.mode = scenario, waypoints, mode
        self.grid, self.rig = grid, rig

    def __len__(self) -> int:
        return len(self.waypoints)

    def __getitem__(self, j: int) -> np.ndarray:
        pose = tuple(self.waypoints[j])
        if self.mode == "direct-bev":
            return render_bev(self.scenario, pose, self.grid)
        return render_scene(self.scenario, pose, self.rig)


class BevFileFrames:
    """Memory-mapped ``bev.bin``."""

    def __init__(self, path):
        self.path = Path(path)
        self.array = read_bev(self.path, mmap=True)
        self.mode = "direct-bev"

    def __len__(self) -> int:
        return self.array.shape[0]

    def __getitem__(self, j: int) -> np.ndarray:
        return np.asarray(self.array[j], dtype=np.float64)


class ImageFrames:
    """PNG files ``images/cam<k>_<j:04d>.png``."""

    def __init__(self, directory, n_frames: int, n_cameras: int):
        self.dir, self.n, self.cams = Path(directory), n_frames, n_cameras
        self.mode = "cameras"

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, j: int) -> np.ndarray:
        from PIL import Image

        imgs = []
        for k in range(self.cams):
            path = self.dir / f"cam{k}_{j:04d}.png"
            if not path.exists():
                raise DataError(f"missing image {path}")
            imgs.append(np.asarray(Image.open(path).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255)
        return np.stack(imgs)


@dataclass
class TrajectoryRecord:
    traj_id: str
    waypoints: np.ndarray  # (N, 3) x, y, heading in the t0 frame
    slot: np.ndarray  # (2,) slot centre in the t0 frame
    frames: object = None  # indexable by waypoint, or None when the modality is missing
    timestamps: np.ndarray | None = None
    scenario: Scenario | None = None
    seed: int = 0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 3)
        self.slot = np.asarray(self.slot, dtype=np.float64).reshape(2)
        if self.timestamps is None:
            seg = np.hypot(*np.diff(self.waypoints[:, :2], axis=0).T)
            self.timestamps = np.concatenate([[0.0], np.cumsum(seg)]) / EXPERT_SPEED


# -- reorganisation ----------------------------------------------------------------

@dataclass
class Sample:
    record_id: str
    index: int
    slot: np.ndarray  # (2,) current ego frame
    future: np.ndarray  # (Q, 2) current ego frame, clamped to the grid range
    pad: np.ndarray  # (Q,) bool, True where a step carries no target
    grid: GridSpec
    sigma: float
    frames: object = field(repr=False, default=None)

    @property
    def sensor(self) -> np.ndarray:
        return self.frames[self.index]

    @property
    def maps(self) -> np.ndarray:
        """(Q, H, W) normalised ground-truth maps."""
        return np.stack([m.values for m in ground_truth_maps(self.future[:, 0], self.future[:, 1],
                                                             self.sigma, self.grid)])


def reorganize(records: Sequence[TrajectoryRecord], horizon: int, grid: GridSpec, sigma: float) -> list[Sample]:
    """One sample per waypoint of every record, in record then waypoint order."""
    out = []
    for rec in records:
        n = len(rec.waypoints)
        if n < 1:
            raise DataError(f"record {rec.traj_id!r} has no waypoints")
        if rec.frames is None:
            raise DataError(f"record {rec.traj_id!r} has no sensor frames")
        if len(rec.frames) != n:
            raise DataError(f"record {rec.traj_id!r}: {len(rec.frames)} frames for {n} waypoints")
        for j in range(n):
            pose = tuple(rec.waypoints[j])
            window = rec.waypoints[future_window(n, j, horizon), :2]
            fut = to_local(window, pose)
            fut = np.clip(fut, [-grid.range_x, -grid.range_y], [grid.range_x, grid.range_y])
            slot = to_local(rec.slot, pose)
            out.append(Sample(rec.traj_id, j, slot, fut, np.zeros(horizon, dtype=bool), grid, sigma, rec.frames))
    return out


def split_records(records: Sequence[TrajectoryRecord], val_fraction: float = 0.1,
                  seed: int = 0) -> tuple[list, list]:
    """Split by whole trajectory."""
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    order = np.random.default_rng(seed).permutation(len(records))
    n_val = int(round(len(records) * val_fraction))
    val = set(order[:n_val].tolist())
    return ([r for i, r in enumerate(records) if i not in val],
            [r for i, r in enumerate(records) if i in val])


# -- generation --------------------------------------------------------------------

def scenario_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_dataset(count: int, seed: int, mode: str = "direct-bev", grid: GridSpec | None = None,
                     rig: CameraRig | None = None, synth: SynthConfig = SynthConfig()) -> list[TrajectoryRecord]:
    """``count`` expert manoeuvres with lazily rendered frames; pure in (count, seed, mode)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if mode not in ("direct-bev", "cameras"):
        raise ValueError(f"unknown mode {mode!r}")
    grid = grid or GridSpec()
    if mode == "cameras":
        rig = rig or CameraRig.surround()
    records = []
    for i in range(count):
        s = scenario_seed(seed, i)
        sc = random_scenario(s, synth)
        traj = plan_expert(sc, synth.radius, synth.spacing)
        frames = RenderedFrames(sc, traj.waypoints, mode, grid, rig)
        records.append(TrajectoryRecord(f"traj_{i:05d}", traj.waypoints, np.array(sc.slot_center),
                                        frames, scenario=sc, seed=s))
    return records


# -- disk I/O ----------------------------------------------------------------------

def write_bev(path, array: np.ndarray) -> None:
    """``BEV_MAGIC``, u32 ndim, u32 dims, then little-endian float32 data."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BEV_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_bev(path, mmap: bool = False) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(BEV_MAGIC)) != BEV_MAGIC:
            raise DataError(f"{path}: not a BEV grid file")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        offset = fh.tell()
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=offset, shape=shape)
    data = np.fromfile(path, dtype="<f4", offset=offset)
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path}: truncated, expected {int(np.prod(shape))} values, found {data.size}")
    return data.reshape(shape)


def write_points(path, timestamps, waypoints) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "heading"])
        for t, (x, y, h) in zip(timestamps, waypoints):
            w.writerow([f"{t:.6f}", repr(float(x)), repr(float(y)), repr(float(h))])


def read_points(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no points")
    t = np.array([float(r["t"]) for r in rows])
    pts = np.array([[float(r["x"]), float(r["y"]), float(r.get("heading", 0.0) or 0.0)] for r in rows])
    return t, pts


def write_dataset(records: Sequence[TrajectoryRecord], root, mode: str, grid: GridSpec,
                  rig: CameraRig | None = None, extra: dict | None = None) -> Path:
    from PIL import Image

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if mode == "cameras":
        (rig or CameraRig.surround()).save(root / "rig.json")
    for rec in records:
        d = root / rec.traj_id
        d.mkdir(exist_ok=True)
        meta = {"id": rec.traj_id, "seed": rec.seed, "mode": mode, "n_points": len(rec.waypoints),
                "slot_center": rec.slot.tolist(),
                "scenario": rec.scenario.to_dict() if rec.scenario else None,
                "rig": "../rig.json" if mode == "cameras" else None}
        (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
        write_points(d / "points.csv", rec.timestamps, rec.waypoints)
        frames = [rec.frames[j] for j in range(len(rec.waypoints))]
        if mode == "direct-bev":
            write_bev(d / "bev.bin", np.stack(frames))
        else:
            img_dir = d / "images"
            img_dir.mkdir(exist_ok=True)
            for j, cams in enumerate(frames):
                for k, img in enumerate(cams):
                    px = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
                    Image.fromarray(px, mode="RGB").save(img_dir / f"cam{k}_{j:04d}.png")
    manifest = {"count": len(records), "mode": mode, "grid": asdict(grid),
                "trajectories": [r.traj_id for r in records], **(extra or {})}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return root


def load_dataset(root) -> tuple[list[TrajectoryRecord], dict]:
    """Records with lazily read frames, and the dataset manifest."""
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise DataError(f"{root} is not a dataset directory (no manifest.json)")
    manifest = json.loads((root / "manifest.json").read_text())
    rig = CameraRig.load(root / "rig.json") if (root / "rig.json").exists() else None
    records = []
    for tid in manifest["trajectories"]:
        d = root / tid
        meta = json.loads((d / "meta.json").read_text())
        t, pts = read_points(d / "points.csv")
        if meta["mode"] == "direct-bev":
            frames = BevFileFrames(d / "bev.bin") if (d / "bev.bin").exists() else None
        else:
            frames = ImageFrames(d / "images", len(pts), len(rig)) if rig and (d / "images").is_dir() else None
        sc = Scenario.from_dict(meta["scenario"]) if meta.get("scenario") else None
        records.append(TrajectoryRecord(tid, pts, np.array(meta["slot_center"]), frames, t, sc, meta.get("seed", 0)))
    return records, manifest
