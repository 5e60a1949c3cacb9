"""Per-subject inverse rendering of primitive payloads from multi-view images."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .body import Pose, PrimitiveFrames, RiggedMesh, lbs_pose, pose_primitives
from .camera import Camera, generate_rays
from .primitives import PrimitiveSet
from .render import MarchConfig, RenderOutput, Scene, _bvh_args, prepare_scene

log = logging.getLogger(__name__)

N_CHUNKS = 8


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 1.0
    sil: float = 0.1
    vol: float = 0.01

    def __post_init__(self):
        if min(self.rgb, self.sil, self.vol) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 1500
    learning_rate: float = 0.02
    lambda_rgb: float = 1.0
    lambda_sil: float = 0.1
    lambda_vol: float = 0.01
    batch: int = 8192
    seed: int = 0
    payload_resolution: int = 4
    sigma_init: float = 5.0
    sigma_max: float = 500.0
    # Adam steps are taken on density / density_unit so one learning rate suits all groups
    density_unit: float = 50.0
    step: float | None = None
    early_stop_transmittance: float = 1e-3

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.lambda_rgb, self.lambda_sil, self.lambda_vol) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch < 1 or self.learning_rate <= 0:
            raise ValueError("batch and learning_rate must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rgb, self.lambda_sil, self.lambda_vol)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Gradients:
    d_color: np.ndarray  # (K, 3, S, S, S)
    d_density: np.ndarray  # (K, S, S, S)
    d_delta_scale: np.ndarray  # (K, 3)


@dataclass(frozen=True)
class MultiViewSample:
    images: list  # N_cam arrays (H, W, 3)
    masks: list  # N_cam arrays (H, W)
    cameras: list  # N_cam Camera
    pose: Pose

    def __post_init__(self):
        if len(self.cameras) < 1:
            raise ValueError("need at least one view")
        if not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise ValueError("images, masks and cameras must have equal counts")
        for i, (img, m, c) in enumerate(zip(self.images, self.masks, self.cameras)):
            if img.shape != (c.height, c.width, 3) or m.shape != (c.height, c.width):
                raise ValueError(f"view {i}: image/mask resolution does not match its camera")


@dataclass
class FitResult:
    primitive_set: PrimitiveSet
    trace: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))  # iteration, total, rgb, sil, vol

    TRACE_COLUMNS = ("iteration", "total", "l_rgb", "l_sil", "l_vol")


def volume_loss(scale: np.ndarray) -> float:
    return float(np.prod(scale, axis=1).sum())


def loss_rec(render: RenderOutput, target_image, target_mask, pset: PrimitiveSet, weights: LossWeights):
    """Weighted reconstruction loss; returns (total, {"rgb", "sil", "vol"})."""
    target_image = np.asarray(target_image, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=np.float64)
    if render.rgb.shape != target_image.shape or render.alpha.shape != target_mask.shape:
        raise ValueError(f"render {render.rgb.shape[:2]} and target {target_image.shape[:2]} resolutions differ")
    l_rgb = float(np.mean((render.rgb - target_image) ** 2))
    l_sil = float(np.mean((render.alpha - target_mask) ** 2))
    l_vol = volume_loss(pset.scale)
    total = weights.rgb * l_rgb + weights.sil * l_sil + weights.vol * l_vol
    return total, {"rgb": l_rgb, "sil": l_sil, "vol": l_vol}


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def _gradient_buffers(K, S, n_chunks=N_CHUNKS):
    return (np.zeros((n_chunks, K, 3, S, S, S)), np.zeros((n_chunks, K, S, S, S)), np.zeros((n_chunks, K, 3)))


def render_backward(pset: PrimitiveSet, camera: Camera, cfg: MarchConfig, d_rgb, d_alpha,
                    forward: RenderOutput | None = None, scene: Scene | None = None) -> Gradients:
    """Exact gradients of the discretized renderer given image-space upstream gradients.

    ``d_rgb`` is taken with respect to the background-composited color.
    """
    H, W = camera.height, camera.width
    d_rgb = np.ascontiguousarray(d_rgb, dtype=np.float64)
    d_alpha = np.ascontiguousarray(d_alpha, dtype=np.float64)
    if d_rgb.shape != (H, W, 3) or d_alpha.shape != (H, W):
        raise ValueError("upstream gradient resolution does not match the camera")
    if forward is not None and not _same_camera(forward.camera, camera):
        raise ValueError("forward pass was rendered with a different camera")
    if scene is None:
        scene = prepare_scene(pset)
    o, d = generate_rays(camera)
    N = H * W
    dcol, dden, dhalf = _gradient_buffers(pset.K, pset.S)
    kernels.backward_rays(o.reshape(N, 3), d.reshape(N, 3), np.full(N, camera.near), np.full(N, camera.far),
                          scene.centers, scene.rotm, scene.half, scene.color, scene.density,
                          *_bvh_args(scene.bvh), True, float(cfg.step), float(cfg.early_stop_transmittance),
                          np.asarray(cfg.background, dtype=np.float64), d_rgb.reshape(N, 3), d_alpha.reshape(N),
                          dcol, dden, dhalf)
    return Gradients(dcol.sum(0), dden.sum(0), dhalf.sum(0) * pset.base_scale)


def _same_camera(a: Camera, b: Camera) -> bool:
    return (a.width, a.height, a.fx, a.fy, a.cx, a.cy, a.near, a.far) == (
        b.width, b.height, b.fx, b.fy, b.cx, b.cy, b.near, b.far) and np.array_equal(
        a.world_from_camera, b.world_from_camera)


class RayObjective:
    """Reconstruction loss over the pooled rays of every view."""

    def __init__(self, data: MultiViewSample, background=(0.0, 0.0, 0.0)):
        origins, dirs, near, far, rgb, mask = [], [], [], [], [], []
        for img, m, cam in zip(data.images, data.masks, data.cameras):
            o, d = generate_rays(cam)
            n = cam.width * cam.height
            origins.append(o.reshape(n, 3))
            dirs.append(d.reshape(n, 3))
            near.append(np.full(n, cam.near))
            far.append(np.full(n, cam.far))
            rgb.append(np.asarray(img, dtype=np.float64).reshape(n, 3))
            mask.append(np.asarray(m, dtype=np.float64).reshape(n))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.near = np.concatenate(near)
        self.far = np.concatenate(far)
        self.rgb = np.concatenate(rgb)
        self.mask = np.concatenate(mask)
        self.background = np.asarray(background, dtype=np.float64)

    @property
    def n_rays(self) -> int:
        return len(self.origins)

    def evaluate(self, pset: PrimitiveSet, cfg: MarchConfig, weights: LossWeights, rays=None):
        """Loss components and gradients w.r.t. (color, density, half-extent) on a ray subset."""
        sel = slice(None) if rays is None else rays
        ro, rd = self.origins[sel], self.dirs[sel]
        B = len(ro)
        scene = prepare_scene(pset)
        dcol, dden, dhalf = _gradient_buffers(pset.K, pset.S)
        sums = np.zeros((N_CHUNKS, 2))
        kernels.fit_rays(np.ascontiguousarray(ro), np.ascontiguousarray(rd),
                         np.ascontiguousarray(self.near[sel]), np.ascontiguousarray(self.far[sel]),
                         scene.centers, scene.rotm, scene.half, scene.color, scene.density,
                         *_bvh_args(scene.bvh), float(cfg.step), float(cfg.early_stop_transmittance),
                         self.background, np.ascontiguousarray(self.rgb[sel]), np.ascontiguousarray(self.mask[sel]),
                         weights.rgb / (3.0 * B), weights.sil / B, dcol, dden, dhalf, sums)
        l_rgb = sums[:, 0].sum() / (3.0 * B)
        l_sil = sums[:, 1].sum() / B
        half = scene.half
        l_vol = float(np.prod(half, axis=1).sum())
        g_half = dhalf.sum(0)
        if weights.vol:
            prod_others = np.stack([half[:, 1] * half[:, 2], half[:, 0] * half[:, 2], half[:, 0] * half[:, 1]], 1)
            g_half = g_half + weights.vol * prod_others
        total = weights.rgb * l_rgb + weights.sil * l_sil + weights.vol * l_vol
        return (total, l_rgb, l_sil, l_vol), (dcol.sum(0), dden.sum(0), g_half)


def initial_set(data: MultiViewSample, mesh: RiggedMesh, frames: PrimitiveFrames, cfg: FitConfig) -> PrimitiveSet:
    """Constant payloads (color 0.5, density sigma_init, delta scale 1) on the posed body."""
    K, S = frames.count, cfg.payload_resolution
    verts = lbs_pose(mesh, data.pose)
    T, q, _ = pose_primitives(frames, verts, np.ones((K, 3)), mesh)
    return PrimitiveSet(
        positions=T, rotations=q, base_scale=frames.base_scale.copy(), delta_scale=np.ones((K, 3)),
        color=np.full((K, 3, S, S, S), 0.5), density=np.full((K, S, S, S), float(cfg.sigma_init)),
        grid_width=frames.grid_width, frames=frames,
    )


class _Adam:
    def __init__(self, shape, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


def fit_subject(data: MultiViewSample, mesh: RiggedMesh, frames: PrimitiveFrames, cfg: FitConfig,
                callback=None) -> FitResult:
    """Adam on (color, density, log delta scale) over uniformly sampled rays of all views."""
    if frames.attach_triangle.max() >= len(mesh.triangles):
        raise ValueError("primitive frames do not belong to this mesh")
    pset = initial_set(data, mesh, frames, cfg)
    if cfg.iterations == 0:
        return FitResult(pset)

    objective = RayObjective(data)
    weights = cfg.weights
    step = cfg.step if cfg.step is not None else pset.default_step()
    march = MarchConfig(step=step, early_stop_transmittance=cfg.early_stop_transmittance)
    rng = np.random.default_rng(cfg.seed)

    color = pset.color.copy()
    density = pset.density.copy()
    log_ds = np.zeros((pset.K, 3))
    opt_c = _Adam(color.shape, cfg.learning_rate)
    opt_d = _Adam(density.shape, cfg.learning_rate)
    opt_s = _Adam(log_ds.shape, cfg.learning_rate)
    trace = np.zeros((cfg.iterations, 5))
    batch = min(cfg.batch, objective.n_rays)
    for it in range(cfg.iterations):
        cur = pset.replace(color=color, density=density, delta_scale=np.exp(log_ds))
        rays = rng.integers(0, objective.n_rays, size=batch)
        (total, l_rgb, l_sil, l_vol), (g_col, g_den, g_half) = objective.evaluate(cur, march, weights, rays)
        if not np.isfinite(total):
            raise FloatingPointError(f"non-finite loss at iteration {it}")
        trace[it] = (it, total, l_rgb, l_sil, l_vol)
        color = np.clip(color - opt_c.step(g_col), 0.0, 1.0)
        density = np.clip(density - cfg.density_unit * opt_d.step(g_den * cfg.density_unit), 0.0, cfg.sigma_max)
        log_ds = log_ds - opt_s.step(g_half * cur.scale)
        if callback is not None:
            callback(it, trace[it])
    final = pset.replace(color=color, density=density, delta_scale=np.exp(log_ds))
    return FitResult(final, trace)
