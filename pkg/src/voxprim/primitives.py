"""The PrimitiveSet container shared by the renderer, fitting, diffusion and I/O."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .body import PrimitiveFrames, quat_to_matrix


class PrimitiveSetError(ValueError):
    """Invariant violation in a PrimitiveSet; the message names the primitive index."""


@dataclass(frozen=True)
class PrimitiveSet:
    """K oriented boxes with voxel payloads.

    Kinematics are world-space: ``positions`` (box centers), ``rotations`` (wxyz,
    columns of the matrix are the box's local x/y/z axes) and half-extents
    ``base_scale * delta_scale``. Payload voxel (a, b, c) of primitive k sits at
    local coordinate -1 + (2a + 1) / S along x (resp. y, z).
    """

    positions: np.ndarray  # (K, 3)
    rotations: np.ndarray  # (K, 4) wxyz
    base_scale: np.ndarray  # (K, 3)
    delta_scale: np.ndarray  # (K, 3)
    color: np.ndarray  # (K, 3, S, S, S) in [0, 1]
    density: np.ndarray  # (K, S, S, S) >= 0, 1/m
    grid_width: int
    frames: PrimitiveFrames | None = None

    @property
    def K(self) -> int:
        return len(self.positions)

    @property
    def S(self) -> int:
        return self.density.shape[-1]

    @property
    def scale(self) -> np.ndarray:
        return self.base_scale * self.delta_scale

    @property
    def rotation_matrices(self) -> np.ndarray:
        return quat_to_matrix(self.rotations)

    def replace(self, **changes) -> "PrimitiveSet":
        return replace(self, **changes)

    def validate(self) -> "PrimitiveSet":
        K, S, W = self.K, self.S, self.grid_width
        if K != W * W:
            raise PrimitiveSetError(f"primitive count {K} != W^2 = {W * W}")
        if S < 2:
            raise PrimitiveSetError(f"payload resolution S={S} must be >= 2")
        shapes = {
            "positions": (self.positions, (K, 3)),
            "rotations": (self.rotations, (K, 4)),
            "base_scale": (self.base_scale, (K, 3)),
            "delta_scale": (self.delta_scale, (K, 3)),
            "color": (self.color, (K, 3, S, S, S)),
            "density": (self.density, (K, S, S, S)),
        }
        for name, (arr, shape) in shapes.items():
            if arr.shape != shape:
                raise PrimitiveSetError(f"{name} has shape {arr.shape}, expected {shape}")
            finite = np.isfinite(arr).reshape(K, -1).all(1)
            if not finite.all():
                raise PrimitiveSetError(f"{name} of primitive {int(np.argmin(finite))} is not finite")
        qn = np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0)
        if np.any(qn > 1e-5):
            raise PrimitiveSetError(f"rotation of primitive {int(np.argmax(qn))} is not a unit quaternion")
        for name, arr in (("base_scale", self.base_scale), ("delta_scale", self.delta_scale)):
            bad = ~(arr > 0).all(1)
            if bad.any():
                raise PrimitiveSetError(f"{name} of primitive {int(np.argmax(bad))} is not strictly positive")
        cbad = ((self.color < 0) | (self.color > 1)).reshape(K, -1).any(1)
        if cbad.any():
            raise PrimitiveSetError(f"color of primitive {int(np.argmax(cbad))} lies outside [0, 1]")
        dbad = (self.density < 0).reshape(K, -1).any(1)
        if dbad.any():
            raise PrimitiveSetError(f"density of primitive {int(np.argmax(dbad))} is negative")
        return self

    def default_step(self) -> float:
        """Half of the smallest mean half-extent."""
        return 0.5 * float(self.scale.mean(axis=1).min())


def from_frames(frames: PrimitiveFrames, S: int, color=0.5, density=5.0, delta_scale=1.0) -> PrimitiveSet:
    """Constant-payload set at the frames' rest kinematics."""
    K = frames.count
    return PrimitiveSet(
        positions=frames.rest_translation.copy(),
        rotations=frames.rest_rotation.copy(),
        base_scale=frames.base_scale.copy(),
        delta_scale=np.full((K, 3), float(delta_scale)),
        color=np.full((K, 3, S, S, S), float(color)),
        density=np.full((K, S, S, S), float(density)),
        grid_width=frames.grid_width,
        frames=frames,
    )


def voxel_local_centers(S: int) -> np.ndarray:
    """Local coordinates of the S voxel centers along one axis."""
    return -1.0 + (2.0 * np.arange(S) + 1.0) / S


def voxel_world_centers(pset: PrimitiveSet) -> np.ndarray:
    """(K, S, S, S, 3) world positions of every payload voxel."""
    c = voxel_local_centers(pset.S)
    local = np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)  # (S,S,S,3)
    scaled = local[None] * pset.scale[:, None, None, None, :]
    R = pset.rotation_matrices
    return np.einsum("kij,kabcj->kabci", R, scaled) + pset.positions[:, None, None, None, :]
