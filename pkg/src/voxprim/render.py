"""Decoder-free volume rendering of primitive sets."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .body import Pose, PrimitiveFrames, RiggedMesh, lbs_pose, pose_primitives
from .bvh import BVH, build_bvh
from .camera import Camera, generate_rays
from .primitives import PrimitiveSet

DEPTH_ALPHA_MIN = 1e-4
RAY_BLOCK = 256


@dataclass(frozen=True)
class MarchConfig:
    step: float
    early_stop_transmittance: float = 1e-3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError("march step must be positive")
        if not 0.0 <= self.early_stop_transmittance <= 0.1:
            raise ValueError("early_stop_transmittance must lie in [0, 0.1]")

    @classmethod
    def for_set(cls, pset: PrimitiveSet, **kw) -> "MarchConfig":
        """Default step: half the smallest mean half-extent."""
        return cls(step=pset.default_step(), **kw)

    def to_dict(self) -> dict:
        return {"step": self.step, "early_stop_transmittance": self.early_stop_transmittance,
                "background": list(self.background)}


@dataclass(frozen=True)
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W), camera.far where alpha < 1e-4
    camera: Camera


class Scene(NamedTuple):
    """Contiguous float64 arrays handed to the kernels."""

    centers: np.ndarray
    rotm: np.ndarray
    half: np.ndarray
    color: np.ndarray
    density: np.ndarray
    bvh: BVH


def prepare_scene(pset: PrimitiveSet, bvh: BVH | None = None) -> Scene:
    centers = np.ascontiguousarray(pset.positions, dtype=np.float64)
    rotm = np.ascontiguousarray(pset.rotation_matrices)
    half = np.ascontiguousarray(pset.scale, dtype=np.float64)
    if bvh is None:
        bvh = build_bvh(centers, rotm, half)
    return Scene(centers, rotm, half,
                 np.ascontiguousarray(pset.color, dtype=np.float64),
                 np.ascontiguousarray(pset.density, dtype=np.float64), bvh)


def _bvh_args(b: BVH):
    return b.lo, b.hi, b.left, b.right, b.start, b.count, b.order


def render_rays(scene: Scene, origins, directions, near, far, cfg: MarchConfig, use_bvh: bool = True):
    """Render flat ray arrays; returns rgb (N, 3), alpha (N,), depth (N,)."""
    ro = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    rd = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    N = len(ro)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (N,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (N,)).copy()
    rgb = np.empty((N, 3))
    alpha = np.empty(N)
    depth = np.empty(N)
    bg = np.asarray(cfg.background, dtype=np.float64)
    kernels.render_rays(ro, rd, near, far, scene.centers, scene.rotm, scene.half, scene.color, scene.density,
                        *_bvh_args(scene.bvh), use_bvh, float(cfg.step), float(cfg.early_stop_transmittance),
                        bg, rgb, alpha, depth, RAY_BLOCK)
    return rgb, alpha, depth


def render(pset: PrimitiveSet, camera: Camera, cfg: MarchConfig, use_bvh: bool = True,
           scene: Scene | None = None) -> RenderOutput:
    H, W = camera.height, camera.width
    if pset.K == 0:
        bg = np.asarray(cfg.background, dtype=np.float64)
        return RenderOutput(np.broadcast_to(bg, (H, W, 3)).copy(), np.zeros((H, W)),
                            np.full((H, W), camera.far), camera)
    if scene is None:
        scene = prepare_scene(pset)
    o, d = generate_rays(camera)
    rgb, alpha, depth = render_rays(scene, o, d, camera.near, camera.far, cfg, use_bvh)
    return RenderOutput(rgb.reshape(H, W, 3), alpha.reshape(H, W), depth.reshape(H, W), camera)


def intersect(origin, direction, scene: Scene, near: float = 0.0, far: float = np.inf, use_bvh: bool = True):
    """Sorted (primitive index, t_enter, t_exit) triples of boxes hit by one ray."""
    K = len(scene.centers)
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    stack = np.empty(128, dtype=np.int64)
    hidx = np.empty(K, dtype=np.int64)
    perm = np.empty(K, dtype=np.int64)
    ht0, ht1 = np.empty(K), np.empty(K)
    hql, hel, hdt = np.empty((K, 3)), np.empty((K, 3)), np.empty((K, 2))
    hax = np.empty((K, 2), dtype=np.int64)
    n = kernels.gather_hits(o, d, float(near), float(far), scene.centers, scene.rotm, scene.half,
                            *_bvh_args(scene.bvh), use_bvh, stack, hidx, ht0, ht1, hql, hel, hdt, hax, perm)
    return [(int(hidx[q]), float(ht0[q]), float(ht1[q])) for q in perm[:n]]


def sample_field(pset: PrimitiveSet, point) -> tuple[np.ndarray, float]:
    """Blended (color, density) at a world point.

    Densities of all boxes containing the point add; color is their
    density-weighted mean (zero where the summed density is zero).
    """
    point = np.asarray(point, dtype=np.float64)
    R = pset.rotation_matrices
    local = np.einsum("kji,kj->ki", R, point[None] - pset.positions) / pset.scale
    inside = np.flatnonzero(np.all(np.abs(local) <= 1.0, axis=1))
    color = np.ascontiguousarray(pset.color, dtype=np.float64)
    density = np.ascontiguousarray(pset.density, dtype=np.float64)
    sig = 0.0
    csum = np.zeros(3)
    for p in inside:
        s, r, g, b = kernels.trilerp(color, density, int(p), *local[p], pset.S)
        sig += s
        csum += s * np.array([r, g, b])
    if sig > 0.0:
        return csum / sig, sig
    return np.zeros(3), sig


def posed_set(pset: PrimitiveSet, mesh: RiggedMesh, frames: PrimitiveFrames, pose: Pose) -> PrimitiveSet:
    """Same payloads, kinematics re-attached to the mesh posed by ``pose``."""
    verts = lbs_pose(mesh, pose)
    T, q, _ = pose_primitives(frames, verts, pset.delta_scale, mesh)
    return pset.replace(positions=T, rotations=q, base_scale=frames.base_scale.copy())


def render_sequence(pset: PrimitiveSet, cfg: MarchConfig, cameras: Sequence[Camera] | Camera,
                    poses: Sequence[Pose] | None = None, mesh: RiggedMesh | None = None,
                    frames: PrimitiveFrames | None = None) -> list[RenderOutput]:
    """Render a camera path, a pose sequence, or both (zipped; a single camera is reused)."""
    if isinstance(cameras, Camera):
        cameras = [cameras] * (len(poses) if poses is not None else 1)
    if poses is None:
        scene = prepare_scene(pset)
        return [render(pset, cam, cfg, scene=scene) for cam in cameras]
    if mesh is None or frames is None:
        raise ValueError("pose-driven rendering needs the rigged mesh and primitive frames")
    if len(cameras) == 1:
        cameras = list(cameras) * len(poses)
    if len(cameras) != len(poses):
        raise ValueError(f"{len(cameras)} cameras for {len(poses)} poses")
    out = []
    for cam, pose in zip(cameras, poses):
        out.append(render(posed_set(pset, mesh, frames, pose), cam, cfg))
    return out
