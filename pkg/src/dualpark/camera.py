"""Pinhole camera rig: intrinsics, extrinsics, JSON persistence and ray geometry.

Camera frame: x right, y down, z forward (optical axis). Ego frame: x forward,
y left, z up, origin at the rear-axle centre on the ground. A pixel ``(u, v)``
(column, row) refers to the pixel centre.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class RigError(ValueError):
    pass


@dataclass
class Camera:
    name: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) camera -> ego
    translation: np.ndarray  # (3,) camera centre in ego frame, metres

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if self.fx == 0 or self.fy == 0:
            raise RigError(f"camera {self.name!r}: zero focal length")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(r), 1.0, atol=1e-9):
            raise RigError(f"camera {self.name!r}: rotation is not a proper rigid rotation")
        if self.width < 1 or self.height < 1:
            raise RigError(f"camera {self.name!r}: empty image size")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, feat_w: int, feat_h: int) -> "Camera":
        """Camera describing a feature map of ``feat_w x feat_h`` over the same field of view."""
        sx, sy = feat_w / self.width, feat_h / self.height
        return Camera(self.name, self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                      (self.cy + 0.5) * sy - 0.5, feat_w, feat_h, self.rotation, self.translation)

    def pixel_rays(self) -> np.ndarray:
        """(H, W, 3) camera-frame rays with unit z for every pixel centre."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1)

    def to_dict(self) -> dict:
        return {"name": self.name, "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}


def look_rotation(yaw: float, pitch_down: float) -> np.ndarray:
    """Camera->ego rotation for a camera facing ``yaw`` and tilted down by ``pitch_down``."""
    cp, sp = math.cos(pitch_down), math.sin(pitch_down)
    forward = np.array([cp * math.cos(yaw), cp * math.sin(yaw), -sp])
    right = np.array([math.sin(yaw), -math.cos(yaw), 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass
class CameraRig:
    cameras: list[Camera] = field(default_factory=list)

    def validate(self) -> None:
        if not self.cameras:
            raise RigError("rig has no cameras")
        for cam in self.cameras:
            cam.validate()

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def image_size(self) -> tuple[int, int]:
        """(height, width); all cameras in a rig share one image size."""
        sizes = {(c.height, c.width) for c in self.cameras}
        if len(sizes) != 1:
            raise RigError(f"cameras disagree on image size: {sorted(sizes)}")
        return sizes.pop()

    @classmethod
    def surround(cls, image_size: int = 64, fov_deg: float = 80.0, height: float = 1.5,
                 pitch_deg: float = 45.0) -> "CameraRig":
        """Four cameras (front, left, rear, right) on a 4.7 m x 1.9 m car body."""
        f = (image_size / 2) / math.tan(math.radians(fov_deg) / 2)
        c = (image_size - 1) / 2
        pitch = math.radians(pitch_deg)
        mounts = [("front", 0.0, (3.7, 0.0)), ("left", math.pi / 2, (1.35, 0.95)),
                  ("rear", math.pi, (-1.0, 0.0)), ("right", -math.pi / 2, (1.35, -0.95))]
        cams = [Camera(name, f, f, c, c, image_size, image_size, look_rotation(yaw, pitch),
                       np.array([px, py, height])) for name, yaw, (px, py) in mounts]
        return cls(cams)

    def to_dict(self) -> dict:
        return {"cameras": [c.to_dict() for c in self.cameras]}

    @classmethod
    def from_dict(cls, data: dict) -> "CameraRig":
        try:
            cams = [Camera(**c) for c in data["cameras"]]
        except (KeyError, TypeError) as exc:
            raise RigError(f"malformed rig description: {exc}") from exc
        rig = cls(cams)
        rig.validate()
        return rig

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CameraRig":
        return cls.from_dict(json.loads(Path(path).read_text()))
