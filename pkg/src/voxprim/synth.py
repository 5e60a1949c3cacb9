"""Synthetic multi-view subjects and texture transfer."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import (Pose, PrimitiveFrames, RiggedMesh, init_primitive_frames, load_pose, load_rigged_mesh,
                   make_toy_body, save_pose, save_rigged_mesh)
from .camera import Camera, load_cameras, ring_cameras, save_cameras
from .fitting import MultiViewSample
from .primitives import PrimitiveSet, from_frames, voxel_local_centers, voxel_world_centers
from .io import atomic_write_text, load_pfm, load_png, load_primitive_set, save_pfm, save_png, save_primitive_set
from .render import MarchConfig, prepare_scene, render

GT_DENSITY = 150.0


@dataclass(frozen=True)
class SyntheticSubject:
    mesh: RiggedMesh
    frames: PrimitiveFrames
    gt_set: PrimitiveSet
    views: MultiViewSample
    march: MarchConfig
    seed: int

    def rerender(self) -> list[np.ndarray]:
        scene = prepare_scene(self.gt_set)
        return [render(self.gt_set, cam, self.march, scene=scene).rgb for cam in self.views.cameras]


def smooth_color_field(points: np.ndarray, rng: np.random.Generator, n_waves: int = 6) -> np.ndarray:
    """Random band-limited RGB field in roughly [0.1, 0.9], evaluated at (..., 3) points."""
    out = np.zeros(points.shape[:-1] + (3,))
    for ch in range(3):
        acc = np.zeros(points.shape[:-1])
        for _ in range(n_waves):
            k = rng.normal(size=3)
            k *= rng.uniform(2.0, 9.0) / np.linalg.norm(k)
            acc += np.sin(points @ k + rng.uniform(0, 2 * np.pi))
        out[..., ch] = 0.5 + 0.4 * np.tanh(acc / np.sqrt(n_waves))
    return out


def textured_set(frames: PrimitiveFrames, S: int, rng: np.random.Generator, density: float = GT_DENSITY) -> PrimitiveSet:
    """Payloads with a world-space color field and density filling the inner half of each box."""
    base = from_frames(frames, S)
    color = smooth_color_field(voxel_world_centers(base), rng)  # (K,S,S,S,3)
    zc = voxel_local_centers(S)
    shell = np.where(zc < 0.0, density, 0.0)
    return base.replace(
        color=np.clip(np.moveaxis(color, -1, 1), 0.0, 1.0),
        density=np.broadcast_to(shell, (frames.count, S, S, S)).copy(),
    )


def make_synthetic_subject(seed: int = 7, W: int = 16, S: int = 4, n_views: int = 16, resolution: int = 128,
                           mesh: RiggedMesh | None = None, frames: PrimitiveFrames | None = None) -> SyntheticSubject:
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    if mesh is None:
        mesh = make_toy_body(seed=seed)
    if frames is None:
        frames = init_primitive_frames(mesh, W)
    gt = textured_set(frames, S, rng)
    march = MarchConfig.for_set(gt)
    cams = ring_cameras(n_views, resolution)
    scene = prepare_scene(gt)
    outs = [render(gt, cam, march, scene=scene) for cam in cams]
    views = MultiViewSample([o.rgb for o in outs], [o.alpha for o in outs], cams, Pose.identity(mesh.n_joints))
    return SyntheticSubject(mesh, frames, gt, views, march, seed)


def held_out_cameras(n_train: int, resolution: int, n: int = 1) -> list[Camera]:
    """Ring cameras placed halfway between consecutive training views."""
    return ring_cameras(n, resolution, offset_deg=180.0 / n_train)


def transfer_texture(src: PrimitiveSet, dst: PrimitiveSet) -> PrimitiveSet:
    """``dst`` wearing ``src``'s color payloads; geometry and density untouched."""
    if src.grid_width != dst.grid_width or src.S != dst.S or src.K != dst.K:
        raise ValueError(f"layout mismatch: src (W={src.grid_width}, S={src.S}) vs dst (W={dst.grid_width}, S={dst.S})")
    return dst.replace(color=src.color.copy())


def save_subject_dir(subject: SyntheticSubject, out) -> list[Path]:
    """Write mesh, cameras, pose, PNG images, PFM masks and the ground-truth set to ``out``."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    written = [out / "mesh.json", out / "cameras.json", out / "pose.json", out / "gt.prm", out / "meta.json"]
    save_rigged_mesh(subject.mesh, written[0])
    save_cameras(list(subject.views.cameras), written[1])
    save_pose(subject.views.pose, written[2])
    save_primitive_set(subject.gt_set, written[3])
    meta = {"grid_width": subject.frames.grid_width, "payload_resolution": subject.gt_set.S,
            "seed": subject.seed, "n_views": len(subject.views.cameras), "march": subject.march.to_dict()}
    atomic_write_text(written[4], json.dumps(meta, indent=1))
    for v, (img, m) in enumerate(zip(subject.views.images, subject.views.masks)):
        written.append(out / "images" / f"{v:03d}.png")
        save_png(img, written[-1])
        written.append(out / "masks" / f"{v:03d}.pfm")
        save_pfm(m, written[-1])
    return written


def load_subject_dir(path, grid_width: int | None = None):
    """Returns (MultiViewSample, mesh, frames, meta) from a directory written by :func:`save_subject_dir`."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"data directory not found: {path}")
    meta_path = path / "meta.json"
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else {}
    mesh = load_rigged_mesh(path / "mesh.json")
    cams = load_cameras(path / "cameras.json")
    pose = load_pose(path / "pose.json", mesh.n_joints)
    images = [load_png(path / "images" / f"{v:03d}.png")[..., :3] for v in range(len(cams))]
    masks = [load_pfm(path / "masks" / f"{v:03d}.pfm") for v in range(len(cams))]
    W = grid_width or int(meta.get("grid_width", 16))
    frames = init_primitive_frames(mesh, W)
    return MultiViewSample(images, masks, cams, pose), mesh, frames, meta


def load_gt_set(path) -> PrimitiveSet:
    return load_primitive_set(Path(path) / "gt.prm")
