"""Scene builders shared by the test modules."""

import numpy as np
from scipy import integrate
from scipy.spatial.transform import Rotation

from voxprim.camera import Camera, look_at
from voxprim.fitting import render_backward
from voxprim.primitives import PrimitiveSet
from voxprim.render import MarchConfig, prepare_scene, render, render_rays


def random_set(rng, W=2, S=2, spread=1.0, size=(0.2, 0.6), density=(0.5, 4.0)) -> PrimitiveSet:
    K = W * W
    q = Rotation.random(K, random_state=int(rng.integers(2**31))).as_quat(scalar_first=True)
    q *= np.sign(q[:, :1])
    return PrimitiveSet(
        positions=rng.uniform(-spread, spread, (K, 3)),
        rotations=q,
        base_scale=rng.uniform(*size, (K, 3)),
        delta_scale=rng.uniform(0.8, 1.25, (K, 3)),
        color=rng.uniform(0, 1, (K, 3, S, S, S)),
        density=rng.uniform(*density, (K, S, S, S)),
        grid_width=W,
    )


def box_set(centers, halves, colors, densities, S=2) -> PrimitiveSet:
    """Axis-aligned boxes with constant payloads; count must be a perfect square."""
    centers = np.asarray(centers, dtype=np.float64)
    K = len(centers)
    W = int(round(np.sqrt(K)))
    assert W * W == K
    color = np.empty((K, 3, S, S, S))
    density = np.empty((K, S, S, S))
    for k in range(K):
        color[k] = np.asarray(colors[k], dtype=np.float64)[:, None, None, None]
        density[k] = densities[k]
    return PrimitiveSet(centers, np.tile([1.0, 0, 0, 0], (K, 1)), np.asarray(halves, dtype=np.float64),
                        np.ones((K, 3)), color, density, W)


def pinhole(eye, target, res=8, fov_deg=40.0, near=0.1, far=20.0, up=(0.0, 1.0, 0.0)) -> Camera:
    f = 0.5 * res / np.tan(np.radians(fov_deg) / 2)
    return Camera(res, res, f, f, res / 2, res / 2, look_at(eye, target, up), near, far)


# ------------------------------------------------------------------ closed-form scenes


def slab(sigma=2.0, c=0.7, L=1.0, S=2):
    return box_set([[0, 0, 0]], [[2.0, 2.0, L / 2]], [[c, c, c]], [sigma], S=S)


def shoot(pset, step, eps=0.0, bg=(0, 0, 0), origin=(0, 0, -5.0), direction=(0, 0, 1.0), far=50.0):
    cfg = MarchConfig(step=step, early_stop_transmittance=eps, background=bg)
    rgb, alpha, depth = render_rays(prepare_scene(pset), np.array([origin]), np.array([direction]), 0.0, far, cfg)
    return rgb[0], alpha[0], depth[0]


def graded_slab():
    """Slab whose color and density vary along z (S=2: linear between voxel centers, clamped beyond)."""
    s = slab(S=2)
    col = s.color.copy()
    col[0, :, :, :, 0] = 0.1
    col[0, :, :, :, 1] = 0.9
    den = s.density.copy()
    den[0, :, :, 0] = 0.5
    den[0, :, :, 1] = 4.0
    return s.replace(color=col, density=den)


def graded_oracle():
    """Continuous emission integral for graded_slab along the axis ray, by adaptive quadrature."""
    def lin(z, a, b):  # z local in [-1, 1]
        return a + (b - a) * np.clip((z + 0.5), 0.0, 1.0)

    sig = lambda s: lin(2 * s - 1, 0.5, 4.0)  # noqa: E731
    col = lambda s: lin(2 * s - 1, 0.1, 0.9)  # noqa: E731
    tau = lambda s: integrate.quad(sig, 0, s, points=[0.25, 0.75])[0]  # noqa: E731
    pix = integrate.quad(lambda s: np.exp(-tau(s)) * sig(s) * col(s), 0, 1, points=[0.25, 0.75],
                         epsabs=1e-13, epsrel=1e-13)[0]
    return pix, 1 - np.exp(-tau(1.0))


# ------------------------------------------------------------------ adjoint check


def scalar_loss(pset, cam, cfg, g_rgb, g_a):
    out = render(pset, cam, cfg)
    return float(np.sum(out.rgb * g_rgb) + np.sum(out.alpha * g_a))


def fd_check(seed, n_params=45):
    """Relative errors of analytic vs central-difference gradients on a random K=4, S=2 scene."""
    rng = np.random.default_rng(seed)
    s = random_set(rng, W=2, S=2, spread=0.3, size=(0.3, 0.6))
    cam = pinhole([0.2, 0.1, 3.0], [0, 0, 0], res=8)
    cfg = MarchConfig(step=0.03, early_stop_transmittance=0.0, background=tuple(rng.uniform(size=3)))
    g_rgb, g_a = rng.normal(size=(8, 8, 3)), rng.normal(size=(8, 8))
    grads = render_backward(s, cam, cfg, g_rgb, g_a)
    groups = {"color": (s.color, grads.d_color, 1e-4), "density": (s.density, grads.d_density, 1e-4),
              "delta_scale": (s.delta_scale, grads.d_delta_scale, 1e-6)}
    errs = []
    for name, (value, g, h) in groups.items():
        support = np.flatnonzero(np.abs(g.reshape(-1)) > 1e-9)
        for idx in rng.choice(support, size=min(n_params // 3, len(support)), replace=False):
            plus, minus = value.copy(), value.copy()
            plus.flat[idx] += h
            minus.flat[idx] -= h
            fp = scalar_loss(s.replace(**{name: plus}), cam, cfg, g_rgb, g_a)
            fm = scalar_loss(s.replace(**{name: minus}), cam, cfg, g_rgb, g_a)
            fd = (fp - fm) / (2 * h)
            a = g.flat[idx]
            errs.append((name, abs(a - fd) / max(abs(a), abs(fd))))
    return errs
