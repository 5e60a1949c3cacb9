"""Pinhole cameras: ray generation, JSON I/O and ring placement.

Camera space follows the OpenGL convention: the camera looks down -z with +y
up, so image row index grows opposite to camera y.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_from_camera: np.ndarray = field(default_factory=lambda: np.eye(4))
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self):
        if not (0.0 < self.near < self.far):
            raise ValueError(f"camera needs 0 < near < far, got near={self.near}, far={self.far}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError("world_from_camera must be 4x4")
        object.__setattr__(self, "world_from_camera", m)

    @property
    def position(self) -> np.ndarray:
        return self.world_from_camera[:3, 3].copy()

    def transformed(self, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> "Camera":
        """Camera moved by the rigid map x -> R x + t applied in world space."""
        M = np.eye(4)
        M[:3, :3] = rotation
        M[:3, 3] = translation
        return Camera(self.width, self.height, self.fx, self.fy, self.cx, self.cy,
                      M @ self.world_from_camera, self.near, self.far)

    def to_dict(self) -> dict:
        return {
            "width": self.width, "height": self.height,
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_from_camera": self.world_from_camera.reshape(-1).tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            int(d["width"]), int(d["height"]), float(d["fx"]), float(d["fy"]),
            float(d["cx"]), float(d["cy"]),
            np.asarray(d["world_from_camera"], dtype=np.float64).reshape(4, 4),
            float(d["near"]), float(d["far"]),
        )


def generate_rays(camera: Camera):
    """Per-pixel ray origins and unit directions through pixel centers, each (H, W, 3)."""
    xs = np.arange(camera.width) + 0.5
    ys = np.arange(camera.height) + 0.5
    px, py = np.meshgrid(xs, ys, indexing="xy")
    d_cam = np.stack([(px - camera.cx) / camera.fx, -(py - camera.cy) / camera.fy, -np.ones_like(px)], axis=-1)
    R = camera.world_from_camera[:3, :3]
    d = d_cam @ R.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    return o, d


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """world_from_camera matrix for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = right, true_up, -fwd, eye
    return M


def ring_cameras(n_views: int, resolution: int, radius: float = 3.2, height: float = 0.35,
                 target=(0.0, -0.1, 0.0), fov_deg: float = 36.0, offset_deg: float = 0.0,
                 near: float = 0.5, far: float = 8.0) -> list[Camera]:
    """``n_views`` cameras evenly spaced on a horizontal ring around ``target``."""
    f = 0.5 * resolution / np.tan(np.radians(fov_deg) / 2)
    cams = []
    for i in range(n_views):
        ang = np.radians(offset_deg) + 2.0 * np.pi * i / n_views
        eye = np.array([radius * np.sin(ang), target[1] + height, radius * np.cos(ang)])
        cams.append(Camera(resolution, resolution, f, f, resolution / 2, resolution / 2,
                           look_at(eye, target), near, far))
    return cams


def save_cameras(cameras: list[Camera], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps([c.to_dict() for c in cameras], indent=1), encoding="utf-8")
    os.replace(tmp, path)


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"camera file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(doc, dict):
        doc = [doc]
    return [Camera.from_dict(d) for d in doc]
