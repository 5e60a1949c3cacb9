"""Rigged template body, linear blend skinning, and primitive attachment frames.

The template is a generic skinned triangle mesh with a UV atlas. Primitives are
anchored on a W x W grid over UV space; each keeps the triangle and barycentric
coordinates it landed on so that it follows the surface when the mesh is posed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

__all__ = [
    "MeshFormatError",
    "RiggedMesh",
    "Pose",
    "PrimitiveFrames",
    "load_rigged_mesh",
    "save_rigged_mesh",
    "load_pose",
    "save_pose",
    "make_toy_body",
    "lbs_pose",
    "init_primitive_frames",
    "base_scales",
    "pose_primitives",
    "tangent_frames",
    "quat_to_matrix",
    "matrix_to_quat",
]

WEIGHT_TOL = 1e-6
SCALE_FLOOR = 1e-4


class MeshFormatError(ValueError):
    """Raised when a rigged mesh or pose fails validation."""


def quat_to_matrix(q):
    """(..., 4) wxyz quaternions to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    flat = q.reshape(-1, 4)
    mats = Rotation.from_quat(flat, scalar_first=True).as_matrix()
    return mats.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(m):
    """(..., 3, 3) rotation matrices to (..., 4) unit wxyz quaternions with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    flat = m.reshape(-1, 3, 3)
    q = Rotation.from_matrix(flat).as_quat(canonical=True, scalar_first=True)
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return q.reshape(m.shape[:-2] + (4,))


def _axis_angle_matrix(rotvec):
    rotvec = np.asarray(rotvec, dtype=np.float64)
    return Rotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(rotvec.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class RiggedMesh:
    """Skinned triangle mesh.

    ``joint_rotations``/``joint_translations`` hold each joint's rest transform
    relative to its parent (the root's is relative to world). Skin weights are
    stored densely as ``(V, 4)`` index/weight pairs; unused slots carry weight 0.
    """

    vertices: np.ndarray  # (V, 3) meters
    triangles: np.ndarray  # (F, 3) int
    uvs: np.ndarray  # (V, 2) in [0, 1]
    joint_parents: np.ndarray  # (J,) int, -1 for the root
    joint_rotations: np.ndarray  # (J, 4) wxyz
    joint_translations: np.ndarray  # (J, 3)
    skin_joints: np.ndarray  # (V, 4) int
    skin_weights: np.ndarray  # (V, 4) float

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joint_parents)

    def validate(self) -> "RiggedMesh":
        V = len(self.vertices)
        J = len(self.joint_parents)
        if self.vertices.shape != (V, 3) or not np.all(np.isfinite(self.vertices)):
            raise MeshFormatError("vertices must be a finite (V, 3) array")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshFormatError("triangles must be index triples")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= V):
            bad = int(np.argmax((self.triangles < 0).any(1) | (self.triangles >= V).any(1)))
            raise MeshFormatError(f"triangle {bad} has a vertex index out of range")
        if self.uvs.shape != (V, 2):
            raise MeshFormatError("uvs must have one (u, v) pair per vertex")
        outside = (self.uvs < 0.0) | (self.uvs > 1.0) | ~np.isfinite(self.uvs)
        if outside.any():
            raise MeshFormatError(f"uv of vertex {int(np.argmax(outside.any(1)))} lies outside [0,1]^2")
        roots = np.flatnonzero(self.joint_parents < 0)
        if len(roots) != 1:
            raise MeshFormatError(f"joint tree must have exactly one root, found {len(roots)}")
        for j, p in enumerate(self.joint_parents):
            if p < -1 or p >= J or p == j or not _is_ancestor_ok(self.joint_parents, j):
                raise MeshFormatError(f"joint {j} has invalid parent {p}")
        if self.joint_rotations.shape != (J, 4) or self.joint_translations.shape != (J, 3):
            raise MeshFormatError("joint rest transforms must be (J, 4) wxyz and (J, 3)")
        qn = np.linalg.norm(self.joint_rotations, axis=1)
        if np.any(np.abs(qn - 1.0) > 1e-6):
            raise MeshFormatError(f"joint {int(np.argmax(np.abs(qn - 1.0)))} rest rotation is not unit-norm")
        if self.skin_joints.shape != (V, 4) or self.skin_weights.shape != (V, 4):
            raise MeshFormatError("skin weights must be (V, 4) joint/weight pairs")
        used = self.skin_weights != 0
        if np.any(used & ((self.skin_joints < 0) | (self.skin_joints >= J))):
            v = int(np.argmax((used & ((self.skin_joints < 0) | (self.skin_joints >= J))).any(1)))
            raise MeshFormatError(f"vertex {v} references a joint out of range")
        if np.any(self.skin_weights < 0):
            v = int(np.argmax((self.skin_weights < 0).any(1)))
            raise MeshFormatError(f"vertex {v} has a negative skin weight")
        sums = self.skin_weights.sum(1)
        if np.any(np.abs(sums - 1.0) > WEIGHT_TOL):
            v = int(np.argmax(np.abs(sums - 1.0) > WEIGHT_TOL))
            raise MeshFormatError(f"skin weights of vertex {v} sum to {sums[v]:.6g}, expected 1")
        return self

    def scaled(self, factor: float) -> "RiggedMesh":
        return RiggedMesh(
            self.vertices * factor, self.triangles, self.uvs, self.joint_parents,
            self.joint_rotations, self.joint_translations * factor,
            self.skin_joints, self.skin_weights,
        )

    def rest_world_transforms(self):
        """(J, 3, 3) rotations and (J, 3) positions of each joint in the rest pose."""
        J = self.n_joints
        R_local = quat_to_matrix(self.joint_rotations)
        Rw = np.zeros((J, 3, 3))
        Pw = np.zeros((J, 3))
        for j in _topological_order(self.joint_parents):
            p = self.joint_parents[j]
            if p < 0:
                Rw[j] = R_local[j]
                Pw[j] = self.joint_translations[j]
            else:
                Rw[j] = Rw[p] @ R_local[j]
                Pw[j] = Pw[p] + Rw[p] @ self.joint_translations[j]
        return Rw, Pw


def _is_ancestor_ok(parents, j):
    seen = set()
    while j >= 0:
        if j in seen:
            return False
        seen.add(j)
        j = parents[j]
    return True


def _topological_order(parents):
    parents = np.asarray(parents)
    order, placed = [], set()
    while len(order) < len(parents):
        progressed = False
        for j, p in enumerate(parents):
            if j not in placed and (p < 0 or p in placed):
                order.append(j)
                placed.add(j)
                progressed = True
        if not progressed:
            raise MeshFormatError("joint tree contains a cycle")
    return order


@dataclass(frozen=True)
class Pose:
    joint_angles: np.ndarray  # (J*3,) axis-angle per joint, radians
    root_translation: np.ndarray  # (3,)

    @classmethod
    def identity(cls, n_joints: int) -> "Pose":
        return cls(np.zeros(3 * n_joints), np.zeros(3))

    @classmethod
    def from_rotations(cls, n_joints: int, rotations: dict[int, np.ndarray], root_translation=(0.0, 0.0, 0.0)):
        angles = np.zeros((n_joints, 3))
        for j, rv in rotations.items():
            angles[j] = rv
        return cls(angles.reshape(-1), np.asarray(root_translation, dtype=np.float64))


@dataclass(frozen=True)
class PrimitiveFrames:
    """UV-grid attachment of K = W^2 primitives; index k = i * W + j for grid cell (i, j)."""

    grid_width: int
    attach_triangle: np.ndarray  # (K,) int
    barycentric: np.ndarray  # (K, 3)
    rest_translation: np.ndarray  # (K, 3)
    rest_rotation: np.ndarray  # (K, 4) wxyz
    base_scale: np.ndarray  # (K, 3)
    degenerate: np.ndarray  # (K,) bool, cells snapped from an uncovered UV location

    @property
    def count(self) -> int:
        return len(self.attach_triangle)

    @property
    def degenerate_count(self) -> int:
        return int(self.degenerate.sum())


# --------------------------------------------------------------------------- I/O


def _atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _field(doc, name, path):
    if name not in doc:
        raise MeshFormatError(f"{path}: missing field '{name}'")
    return doc[name]


def load_rigged_mesh(path) -> RiggedMesh:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"rigged mesh file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        verts = np.asarray(_field(doc, "vertices", path), dtype=np.float64)
        tris = np.asarray(_field(doc, "triangles", path), dtype=np.int64)
        uvs = np.asarray(_field(doc, "uvs", path), dtype=np.float64)
        joints = _field(doc, "joints", path)
        weights = _field(doc, "skin_weights", path)
    except (TypeError, ValueError) as exc:
        raise MeshFormatError(f"{path}: malformed array field ({exc})") from exc
    if verts.size % 3 or tris.size % 3 or uvs.size % 2:
        raise MeshFormatError(f"{path}: flat arrays have lengths not divisible by their arity")
    verts, tris, uvs = verts.reshape(-1, 3), tris.reshape(-1, 3), uvs.reshape(-1, 2)

    J = len(joints)
    parents = np.zeros(J, dtype=np.int64)
    jrot = np.zeros((J, 4))
    jtra = np.zeros((J, 3))
    for j, jd in enumerate(joints):
        try:
            parents[j] = int(jd["parent"])
            jrot[j] = np.asarray(jd["rest_rotation_wxyz"], dtype=np.float64)
            jtra[j] = np.asarray(jd["rest_translation"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise MeshFormatError(f"{path}: joint {j} is malformed ({exc})") from exc

    V = len(verts)
    if len(weights) != V:
        raise MeshFormatError(f"{path}: skin_weights has {len(weights)} entries for {V} vertices")
    sj = np.zeros((V, 4), dtype=np.int64)
    sw = np.zeros((V, 4))
    for v, pairs in enumerate(weights):
        if len(pairs) > 4:
            raise MeshFormatError(f"{path}: vertex {v} has more than 4 skin weights")
        for slot, pair in enumerate(pairs):
            try:
                sj[v, slot] = int(pair[0])
                sw[v, slot] = float(pair[1])
            except (TypeError, ValueError, IndexError) as exc:
                raise MeshFormatError(f"{path}: vertex {v} skin weight is malformed") from exc
    return RiggedMesh(verts, tris, uvs, parents, jrot, jtra, sj, sw).validate()


def save_rigged_mesh(mesh: RiggedMesh, path) -> None:
    weights = []
    for v in range(mesh.n_vertices):
        pairs = [[int(j), float(w)] for j, w in zip(mesh.skin_joints[v], mesh.skin_weights[v]) if w != 0.0]
        weights.append(pairs)
    doc = {
        "vertices": mesh.vertices.reshape(-1).tolist(),
        "triangles": mesh.triangles.reshape(-1).astype(int).tolist(),
        "uvs": mesh.uvs.reshape(-1).tolist(),
        "joints": [
            {
                "parent": int(p),
                "rest_rotation_wxyz": mesh.joint_rotations[j].tolist(),
                "rest_translation": mesh.joint_translations[j].tolist(),
            }
            for j, p in enumerate(mesh.joint_parents)
        ],
        "skin_weights": weights,
    }
    _atomic_write_text(path, json.dumps(doc))


def load_poses(path, n_joints: int | None = None) -> list[Pose]:
    """A pose file holding either one pose object or a list of them."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pose file not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    docs = doc if isinstance(doc, list) else [doc]
    if not docs:
        raise MeshFormatError(f"{path}: empty pose list")
    return [_pose_from_doc(d, path, n_joints) for d in docs]


def load_pose(path, n_joints: int | None = None) -> Pose:
    poses = load_poses(path, n_joints)
    if len(poses) != 1:
        raise MeshFormatError(f"{path}: expected a single pose, found {len(poses)}")
    return poses[0]


def _pose_from_doc(doc, path, n_joints):
    try:
        angles = np.asarray(doc["angles"], dtype=np.float64).reshape(-1)
        trans = np.asarray(doc["root_translation"], dtype=np.float64).reshape(-1)
    except (KeyError, TypeError, ValueError) as exc:
        raise MeshFormatError(f"{path}: malformed pose ({exc})") from exc
    if trans.shape != (3,):
        raise MeshFormatError(f"{path}: root_translation must have 3 entries")
    if n_joints is not None and angles.shape != (3 * n_joints,):
        raise MeshFormatError(f"{path}: pose has {angles.size} angles, expected {3 * n_joints}")
    return Pose(angles, trans)


def _pose_doc(pose: Pose) -> dict:
    return {"angles": np.asarray(pose.joint_angles).tolist(), "root_translation": np.asarray(pose.root_translation).tolist()}


def save_pose(pose: Pose | list[Pose], path) -> None:
    doc = [_pose_doc(p) for p in pose] if isinstance(pose, list) else _pose_doc(pose)
    _atomic_write_text(path, json.dumps(doc))


# --------------------------------------------------------------------- toy body

JOINT_NAMES = (
    "root", "spine", "chest", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
JOINT_PARENTS = (-1, 0, 1, 2, 3, 2, 5, 6, 2, 8, 9, 0, 11, 12, 0, 14, 15)

# (chart u0, v0, du, dv); the six charts tile the unit square.
_CHARTS = {
    "torso": (0.0, 0.0, 0.5, 0.6),
    "head": (0.0, 0.6, 0.5, 0.4),
    "l_arm": (0.5, 0.0, 0.25, 0.5),
    "r_arm": (0.75, 0.0, 0.25, 0.5),
    "l_leg": (0.5, 0.5, 0.25, 0.5),
    "r_leg": (0.75, 0.5, 0.25, 0.5),
}


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _tube(start, end, radius_fn, chain, chart, around, along, blend):
    """Open cylinder from ``start`` to ``end`` skinned along a joint chain.

    ``chain`` is a list of (joint index, position) pairs ordered along the tube;
    the bone after each joint position is driven by that joint.
    """
    start, end = np.asarray(start, float), np.asarray(end, float)
    axis = end - start
    length = np.linalg.norm(axis)
    axis /= length
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)  # (e1, e2, axis) is right-handed

    u0, v0, du, dv = chart
    phis = np.linspace(0.0, 2.0 * np.pi, around + 1)
    fracs = np.linspace(0.0, 1.0, along + 1)
    verts, uvs = [], []
    for j, f in enumerate(fracs):
        c = start + f * length * axis
        r = radius_fn(f)
        for i, phi in enumerate(phis):
            verts.append(c + r * (np.cos(phi) * e1 + np.sin(phi) * e2))
            uvs.append((u0 + du * i / around, v0 + dv * j / along))
    verts = np.array(verts)
    uvs = np.array(uvs)

    cols = around + 1
    tris = []
    for j in range(along):
        for i in range(around):
            a, b = j * cols + i, j * cols + i + 1
            c, d = (j + 1) * cols + i + 1, (j + 1) * cols + i
            tris.append((a, b, c))
            tris.append((a, c, d))
    tris = np.array(tris, dtype=np.int64)

    # skin weights by arc position along the chain axis
    pos = (verts - start) @ axis
    joint_pos = np.array([(np.asarray(p, float) - start) @ axis for _, p in chain])
    sj = np.zeros((len(verts), 4), dtype=np.int64)
    sw = np.zeros((len(verts), 4))
    for v, x in enumerate(pos):
        m = int(np.searchsorted(joint_pos, x, side="right")) - 1
        m = min(max(m, 0), len(chain) - 1)
        weights = {chain[m][0]: 1.0}
        # blend with the previous bone near joint m, and with the next bone near joint m+1
        if m > 0 and x - joint_pos[m] < blend:
            w = _smoothstep((x - joint_pos[m] + blend) / (2 * blend))
            weights = {chain[m][0]: w, chain[m - 1][0]: 1.0 - w}
        elif m + 1 < len(chain) and joint_pos[m + 1] - x < blend:
            w = _smoothstep((x - joint_pos[m + 1] + blend) / (2 * blend))
            weights = {chain[m + 1][0]: w, chain[m][0]: 1.0 - w}
        items = [(jj, ww) for jj, ww in weights.items() if ww > 0.0]
        total = sum(ww for _, ww in items)
        for slot, (jj, ww) in enumerate(items):
            sj[v, slot] = jj
            sw[v, slot] = ww / total
    return verts, tris, uvs, sj, sw


def make_toy_body(segments=(16, 24), seed: int = 0) -> RiggedMesh:
    """Procedural capsule-limb humanoid in a T-pose, y up, root at the pelvis.

    ``segments`` is (vertices around each tube, rings along each tube). The seed
    jitters limb lengths and radii by a few percent.
    """
    around = max(3, int(segments[0]))
    along = max(1, int(segments[1]))
    rng = np.random.default_rng(seed)
    jit = lambda: 1.0 + 0.05 * (2.0 * rng.random() - 1.0)  # noqa: E731

    spine_h, chest_h, neck_h, head_h = 0.2 * jit(), 0.2 * jit(), 0.15 * jit(), 0.1 * jit()
    shoulder_x, upper_arm, fore_arm, hand = 0.18 * jit(), 0.27 * jit(), 0.25 * jit(), 0.1 * jit()
    hip_x, thigh, shin, foot = 0.1 * jit(), 0.45 * jit(), 0.4 * jit(), 0.06 * jit()
    r_torso, r_head, r_arm, r_leg = 0.15 * jit(), 0.1 * jit(), 0.05 * jit(), 0.07 * jit()

    local = np.zeros((17, 3))
    local[1] = (0, spine_h, 0)
    local[2] = (0, chest_h, 0)
    local[3] = (0, neck_h, 0)
    local[4] = (0, head_h, 0)
    local[5] = (shoulder_x, neck_h * 0.5, 0)
    local[6] = (upper_arm, 0, 0)
    local[7] = (fore_arm, 0, 0)
    local[8] = (-shoulder_x, neck_h * 0.5, 0)
    local[9] = (-upper_arm, 0, 0)
    local[10] = (-fore_arm, 0, 0)
    local[11] = (hip_x, -0.05, 0)
    local[12] = (0, -thigh, 0)
    local[13] = (0, -shin, 0)
    local[14] = (-hip_x, -0.05, 0)
    local[15] = (0, -thigh, 0)
    local[16] = (0, -shin, 0)
    world = np.zeros((17, 3))
    for j in range(1, 17):
        world[j] = world[JOINT_PARENTS[j]] + local[j]

    blend = 0.04
    parts = []
    top = world[3]
    parts.append(_tube(
        (0, -0.12, 0), top, lambda f: r_torso * (0.9 + 0.15 * np.sin(np.pi * f)) * (1.0 - 0.3 * f),
        [(0, world[0]), (1, world[1]), (2, world[2]), (3, world[3])], _CHARTS["torso"], around, along, blend))
    head_top = world[4] + np.array([0, 0.12, 0])
    parts.append(_tube(
        top, head_top, lambda f: r_head * (0.45 + 0.55 * np.sin(np.pi * (0.15 + 0.75 * f))),
        [(3, world[3]), (4, world[4])], _CHARTS["head"], around, along, blend))
    for side, (sh, el, wr), chart in (("l", (5, 6, 7), "l_arm"), ("r", (8, 9, 10), "r_arm")):
        sgn = 1.0 if side == "l" else -1.0
        end = world[wr] + np.array([sgn * hand, 0, 0])
        parts.append(_tube(
            world[sh], end, lambda f: r_arm * (1.0 - 0.25 * f),
            [(sh, world[sh]), (el, world[el]), (wr, world[wr])], _CHARTS[chart], around, along, blend))
    for side, (hp, kn, an), chart in (("l", (11, 12, 13), "l_leg"), ("r", (14, 15, 16), "r_leg")):
        end = world[an] + np.array([0, -foot, 0])
        parts.append(_tube(
            world[hp], end, lambda f: r_leg * (1.0 - 0.35 * f),
            [(hp, world[hp]), (kn, world[kn]), (an, world[an])], _CHARTS[chart], around, along, blend))

    verts, tris, uvs, sjs, sws = [], [], [], [], []
    offset = 0
    for v, t, uv, sj, sw in parts:
        verts.append(v)
        tris.append(t + offset)
        uvs.append(uv)
        sjs.append(sj)
        sws.append(sw)
        offset += len(v)
    uvs = np.clip(np.concatenate(uvs), 0.0, 1.0)
    jrot = np.tile([1.0, 0.0, 0.0, 0.0], (17, 1))
    return RiggedMesh(
        np.concatenate(verts), np.concatenate(tris), uvs,
        np.array(JOINT_PARENTS, dtype=np.int64), jrot, local,
        np.concatenate(sjs), np.concatenate(sws),
    ).validate()


# -------------------------------------------------------------------------- LBS


def joint_skinning_transforms(mesh: RiggedMesh, pose: Pose):
    """Per-joint world transforms relative to the rest pose, as (J,3,3) and (J,3).

    A joint with an all-zero angle contributes an exact identity, so the zero
    pose yields exact identities throughout.
    """
    J = mesh.n_joints
    angles = np.asarray(pose.joint_angles, dtype=np.float64)
    if angles.shape != (3 * J,):
        raise ValueError(f"pose has {angles.size} angles, mesh has {J} joints (expected {3 * J})")
    trans = np.asarray(pose.root_translation, dtype=np.float64)
    if trans.shape != (3,):
        raise ValueError("root_translation must have 3 entries")
    angles = angles.reshape(J, 3)
    Rw, Pw = mesh.rest_world_transforms()
    G_R = np.zeros((J, 3, 3))
    G_t = np.zeros((J, 3))
    for j in _topological_order(mesh.joint_parents):
        if np.any(angles[j] != 0.0):
            R_world = Rw[j] @ _axis_angle_matrix(angles[j]) @ Rw[j].T
            C_R, C_t = R_world, Pw[j] - R_world @ Pw[j]
        else:
            C_R, C_t = np.eye(3), np.zeros(3)
        p = mesh.joint_parents[j]
        if p < 0:
            G_R[j] = C_R
            G_t[j] = C_t + trans
        else:
            G_R[j] = G_R[p] @ C_R
            G_t[j] = G_R[p] @ C_t + G_t[p]
    return G_R, G_t


def lbs_pose(mesh: RiggedMesh, pose: Pose) -> np.ndarray:
    """Posed vertex positions v + sum_j w_j (G_j v - v).

    Equal to sum_j w_j G_j v for normalized weights; the displacement form keeps
    the zero pose bit-exact.
    """
    G_R, G_t = joint_skinning_transforms(mesh, pose)
    v = mesh.vertices
    disp = np.zeros_like(v)
    for slot in range(mesh.skin_joints.shape[1]):
        j = mesh.skin_joints[:, slot]
        w = mesh.skin_weights[:, slot]
        moved = np.einsum("vab,vb->va", G_R[j], v) + G_t[j]
        disp += w[:, None] * (moved - v)
    return v + disp


# ------------------------------------------------------------- primitive frames


def tangent_frames(positions: np.ndarray, uvs: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """(F, 3, 3) rotation matrices whose columns are (tangent, bitangent, normal).

    Tangent is d(position)/du Gram-Schmidt orthonormalized against the triangle
    normal; bitangent completes a right-handed frame.
    """
    p0, p1, p2 = (positions[triangles[:, k]] for k in range(3))
    t0, t1, t2 = (uvs[triangles[:, k]] for k in range(3))
    e1, e2 = p1 - p0, p2 - p0
    d1, d2 = t1 - t0, t2 - t0
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    det = d1[:, 0] * d2[:, 1] - d2[:, 0] * d1[:, 1]
    # dP/du from [e1 e2] = [dP/du dP/dv] [d1 d2]
    dpdu = (e1 * d2[:, 1:2] - e2 * d1[:, 1:2]) / det[:, None]
    t = dpdu - np.sum(dpdu * n, axis=1, keepdims=True) * n
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=2)


def _uv_barycentrics(points, uvs, triangles):
    """Barycentric coordinates of every point w.r.t. every UV triangle, (P, F, 3)."""
    a = uvs[triangles[:, 0]]
    b = uvs[triangles[:, 1]]
    c = uvs[triangles[:, 2]]
    v0, v1 = b - a, c - a
    d00 = np.sum(v0 * v0, 1)
    d01 = np.sum(v0 * v1, 1)
    d11 = np.sum(v1 * v1, 1)
    denom = d00 * d11 - d01 * d01
    v2 = points[:, None, :] - a[None]
    d20 = np.sum(v2 * v0[None], 2)
    d21 = np.sum(v2 * v1[None], 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (d11 * d20 - d01 * d21) / denom
        l2 = (d00 * d21 - d01 * d20) / denom
    return np.stack([1.0 - l1 - l2, l1, l2], axis=2)


def _triangle_islands(mesh: RiggedMesh) -> np.ndarray:
    F = len(mesh.triangles)
    rows = np.repeat(np.arange(F), 3)
    cols = mesh.triangles.reshape(-1)
    inc = coo_matrix((np.ones(3 * F), (rows, cols)), shape=(F, mesh.n_vertices)).tocsr()
    adj = inc @ inc.T
    _, labels = connected_components(adj, directed=False)
    return labels


def init_primitive_frames(mesh: RiggedMesh, W: int) -> PrimitiveFrames:
    """Anchor W^2 primitives at UV grid centers ((i+.5)/W, (j+.5)/W).

    Each grid point is located inside a UV triangle; points not covered by any
    triangle are flagged degenerate and take the attachment of the nearest
    covered grid cell.
    """
    if W < 2:
        raise ValueError("grid width W must be >= 2")
    if len(mesh.triangles) == 0:
        raise ValueError("mesh has no triangles to attach primitives to")
    centers = (np.arange(W) + 0.5) / W
    ii, jj = np.meshgrid(np.arange(W), np.arange(W), indexing="ij")
    grid_uv = np.stack([centers[ii.reshape(-1)], centers[jj.reshape(-1)]], axis=1)

    K = W * W
    tri = np.full(K, -1, dtype=np.int64)
    bary = np.zeros((K, 3))
    tol = -1e-12
    for start in range(0, K, 256):
        stop = min(K, start + 256)
        lam = _uv_barycentrics(grid_uv[start:stop], mesh.uvs, mesh.triangles)
        inside = np.all(lam >= tol, axis=2) & np.all(np.isfinite(lam), axis=2)
        has = inside.any(axis=1)
        first = np.argmax(inside, axis=1)
        for r in np.flatnonzero(has):
            tri[start + r] = first[r]
            b = np.clip(lam[r, first[r]], 0.0, None)
            bary[start + r] = b / b.sum()

    degenerate = tri < 0
    if degenerate.all():
        raise ValueError("UV atlas covers none of the grid cells")
    if degenerate.any():
        covered = np.flatnonzero(~degenerate)
        cov_ij = np.stack([covered // W, covered % W], axis=1)
        for k in np.flatnonzero(degenerate):
            d = np.abs(cov_ij - (k // W, k % W)).sum(1)
            src = covered[int(np.argmin(d))]
            tri[k] = tri[src]
            bary[k] = bary[src]

    T, R = _attached_kinematics(mesh.vertices, mesh.uvs, mesh.triangles, tri, bary)
    provisional = PrimitiveFrames(W, tri, bary, T, matrix_to_quat(R), np.ones((K, 3)), degenerate)
    return PrimitiveFrames(W, tri, bary, T, provisional.rest_rotation, base_scales(provisional, mesh), degenerate)


def _attached_kinematics(positions, uvs, triangles, tri, bary):
    corners = positions[triangles[tri]]  # (K, 3, 3)
    T = np.einsum("kc,kcd->kd", bary, corners)
    R = tangent_frames(positions, uvs, triangles[tri])
    return T, R


def base_scales(frames: PrimitiveFrames, mesh: RiggedMesh) -> np.ndarray:
    """Per-primitive base half-extents from 3D spacing to UV-grid neighbors.

    x: half the mean distance to the u-adjacent grid neighbors, y: same along v,
    z: mean of x and y. Neighbors anchored on a different UV island (another
    chart of the atlas) are ignored; an axis with no valid neighbor borrows the
    other axis.
    """
    W = frames.grid_width
    P = frames.rest_translation.reshape(W, W, 3)
    island = _triangle_islands(mesh)[frames.attach_triangle].reshape(W, W)

    def axis_spacing(axis):
        total = np.zeros((W, W))
        count = np.zeros((W, W))
        for shift in (-1, 1):
            nb = np.roll(P, -shift, axis=axis)
            nb_island = np.roll(island, -shift, axis=axis)
            valid = nb_island == island
            idx = np.arange(W) + shift
            in_grid = (idx >= 0) & (idx < W)
            valid &= in_grid[:, None] if axis == 0 else in_grid[None, :]
            dist = np.linalg.norm(nb - P, axis=2)
            total += np.where(valid, dist, 0.0)
            count += valid
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(count > 0, 0.5 * total / np.maximum(count, 1), np.nan)

    sx, sy = axis_spacing(0), axis_spacing(1)
    sx = np.where(np.isnan(sx), sy, sx)
    sy = np.where(np.isnan(sy), sx, sy)
    sx = np.nan_to_num(sx, nan=SCALE_FLOOR)
    sy = np.nan_to_num(sy, nan=SCALE_FLOOR)
    s = np.stack([sx, sy, 0.5 * (sx + sy)], axis=2).reshape(-1, 3)
    return np.maximum(s, SCALE_FLOOR)


def pose_primitives(frames: PrimitiveFrames, posed_vertices: np.ndarray, delta_scales: np.ndarray, mesh: RiggedMesh):
    """World kinematics (positions, wxyz rotations, half-extents) on the posed surface."""
    delta_scales = np.asarray(delta_scales, dtype=np.float64)
    if delta_scales.shape != (frames.count, 3):
        raise ValueError(f"delta_scales must be ({frames.count}, 3), got {delta_scales.shape}")
    if not np.all(delta_scales > 0):
        k = int(np.argmax(~(delta_scales > 0).all(1)))
        raise ValueError(f"delta scale of primitive {k} is not strictly positive")
    T, R = _attached_kinematics(np.asarray(posed_vertices, dtype=np.float64), mesh.uvs, mesh.triangles,
                                frames.attach_triangle, frames.barycentric)
    return T, matrix_to_quat(R), frames.base_scale * delta_scales
