"""DDPM machinery on the packed primitive tensor.

The diffusion state is a [W*S, W*S, 7*S] array. Grid cell (i, j) owns the
spatial block [i*S:(i+1)*S, j*S:(j+1)*S]; along the last axis channel c
(R, G, B, sigma, dsx, dsy, dsz) at payload depth d lives at c*S + d. The
payload voxel (a, b, d) of primitive k = i*W + j maps to block position
(a, b) and depth d.

Steps are 1-based: t = 1..T, with alpha_bar_0 = 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .body import PrimitiveFrames
from .primitives import PrimitiveSet

N_CHANNELS = 7

Denoiser = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class Normalization:
    """Affine color/density maps onto [-1, 1] and a log map for delta scales."""

    sigma_max: float = 500.0
    delta_log_scale: float = 1.0

    def __post_init__(self):
        if not self.sigma_max > 0 or not self.delta_log_scale > 0:
            raise ValueError("sigma_max and delta_log_scale must be positive")

    def color_to(self, c):
        return 2.0 * c - 1.0

    def color_from(self, u):
        return (u + 1.0) * 0.5

    def density_to(self, s):
        return 2.0 * s / self.sigma_max - 1.0

    def density_from(self, u):
        return (u + 1.0) * 0.5 * self.sigma_max

    def delta_to(self, ds):
        return np.log(ds) * self.delta_log_scale

    def delta_from(self, u):
        return np.exp(u / self.delta_log_scale)

    def to_dict(self) -> dict:
        return {"sigma_max": self.sigma_max, "delta_log_scale": self.delta_log_scale}


@dataclass(frozen=True)
class PackedTensor:
    data: np.ndarray
    W: int
    S: int

    def __post_init__(self):
        expect = (self.W * self.S, self.W * self.S, N_CHANNELS * self.S)
        if self.data.shape != expect:
            raise ValueError(f"packed tensor has shape {self.data.shape}, expected {expect} for W={self.W}, S={self.S}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def packed_shape(W: int, S: int) -> tuple[int, int, int]:
    return (W * S, W * S, N_CHANNELS * S)


def pack(pset: PrimitiveSet, norm: Normalization = Normalization()) -> PackedTensor:
    pset.validate()
    W, S, K = pset.grid_width, pset.S, pset.K
    ch = np.empty((K, N_CHANNELS, S, S, S))
    ch[:, :3] = norm.color_to(pset.color)
    ch[:, 3] = norm.density_to(pset.density)
    ch[:, 4:] = norm.delta_to(pset.delta_scale)[:, :, None, None, None]
    # (i, j, c, a, b, d) -> (i, a, j, b, c, d)
    blocks = ch.reshape(W, W, N_CHANNELS, S, S, S).transpose(0, 3, 1, 4, 2, 5)
    return PackedTensor(np.ascontiguousarray(blocks.reshape(W * S, W * S, N_CHANNELS * S)), W, S)


def unpack_channels(tensor: PackedTensor) -> np.ndarray:
    """Inverse layout transform: (K, 7, S, S, S) still in diffusion space."""
    W, S = tensor.W, tensor.S
    x = tensor.data.reshape(W, S, W, S, N_CHANNELS, S).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(W * W, N_CHANNELS, S, S, S)


def unpack(tensor: PackedTensor, template: PrimitiveSet | PrimitiveFrames,
           norm: Normalization = Normalization()) -> PrimitiveSet:
    """Payloads and delta scales from ``tensor``; kinematics from ``template``.

    Colors and densities are clamped to their valid ranges; each delta scale is
    exp of the mean over its S^3 broadcast copies.
    """
    if isinstance(template, PrimitiveFrames):
        base = PrimitiveSet(template.rest_translation.copy(), template.rest_rotation.copy(),
                            template.base_scale.copy(), np.ones((template.count, 3)),
                            np.zeros((template.count, 3, tensor.S, tensor.S, tensor.S)),
                            np.zeros((template.count, tensor.S, tensor.S, tensor.S)),
                            template.grid_width, template)
    else:
        base = template
    if base.grid_width != tensor.W or base.K != tensor.W ** 2:
        raise ValueError(f"tensor layout W={tensor.W} does not match template W={base.grid_width}")
    ch = unpack_channels(tensor)
    ds_mean = ch[:, 4:].reshape(base.K, 3, -1).mean(axis=2)
    return base.replace(
        color=np.clip(norm.color_from(ch[:, :3]), 0.0, 1.0),
        density=np.clip(norm.density_from(ch[:, 3]), 0.0, norm.sigma_max),
        delta_scale=norm.delta_from(ds_mean),
    )


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by t - 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def abar(self, t: int) -> float:
        """alpha_bar_t with alpha_bar_0 = 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def check_step(self, t: int, lo: int = 1) -> None:
        if not lo <= t <= self.T:
            raise ValueError(f"step {t} outside [{lo}, {self.T}]")

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": float(self.beta[0]), "beta_T": float(self.beta[-1])}


def make_schedule(T: int = 1000, beta_1: float = 1e-4, beta_T: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_1 <= beta_T < 1.0:
        raise ValueError(f"need 0 < beta_1 <= beta_T < 1, got {beta_1}, {beta_T}")
    beta = np.linspace(beta_1, beta_T, T) if T > 1 else np.array([beta_1])
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def q_sample(V0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption; t = 0 returns V0 unchanged."""
    schedule.check_step(t, lo=0)
    if t == 0:
        return np.array(V0, dtype=np.float64, copy=True)
    ab = schedule.abar(t)
    return np.sqrt(ab) * V0 + np.sqrt(1.0 - ab) * noise


def posterior_coefficients(t: int, schedule: NoiseSchedule) -> tuple[float, float, float]:
    """(coef on V_t, coef on V0, posterior variance) of q(V_{t-1} | V_t, V0)."""
    schedule.check_step(t)
    if t == 1:
        # 1 - alpha_bar_1 = beta_1 exactly in real arithmetic; skip the rounding
        return 0.0, 1.0, 0.0
    ab, ab_prev = schedule.abar(t), schedule.abar(t - 1)
    beta, alpha = float(schedule.beta[t - 1]), float(schedule.alpha[t - 1])
    c_t = np.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
    c_0 = np.sqrt(ab_prev) * beta / (1.0 - ab)
    var = (1.0 - ab_prev) / (1.0 - ab) * beta
    return c_t, c_0, var


def posterior_mean(Vt: np.ndarray, V0: np.ndarray, t: int, schedule: NoiseSchedule):
    """Returns (mu_tilde, beta_tilde)."""
    c_t, c_0, var = posterior_coefficients(t, schedule)
    return c_t * Vt + c_0 * V0, var


def _denoise(denoiser: Denoiser, Vt: np.ndarray, t: int) -> np.ndarray:
    out = np.asarray(denoiser(Vt, t), dtype=np.float64)
    if out.shape != Vt.shape:
        raise ValueError(f"denoiser returned shape {out.shape} for input {Vt.shape}")
    return out


def predict_mean(Vt: np.ndarray, t: int, denoiser: Denoiser, schedule: NoiseSchedule) -> np.ndarray:
    """Reverse-step mean from an x0-predicting denoiser."""
    schedule.check_step(t)
    ab = schedule.abar(t)
    alpha = float(schedule.alpha[t - 1])
    x0 = _denoise(denoiser, Vt, t)
    if t == 1:
        return x0
    return (Vt - (1.0 - alpha) / (1.0 - ab) * (Vt - np.sqrt(ab) * x0)) / np.sqrt(alpha)


def simple_loss(V0: np.ndarray, t: int, noise: np.ndarray, denoiser: Denoiser, schedule: NoiseSchedule) -> float:
    V0 = np.asarray(V0, dtype=np.float64)
    if noise.shape != V0.shape:
        raise ValueError(f"noise shape {noise.shape} != data shape {V0.shape}")
    Vt = q_sample(V0, t, noise, schedule)
    return float(np.mean((V0 - _denoise(denoiser, Vt, t)) ** 2))


def _reverse_step(V: np.ndarray, t: int, denoiser: Denoiser, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> np.ndarray:
    mu = predict_mean(V, t, denoiser, schedule)
    if t > 1:
        _, _, var = posterior_coefficients(t, schedule)
        mu = mu + np.sqrt(var) * rng.standard_normal(V.shape)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError(f"non-finite diffusion state at reverse step t={t}")
    return mu


def sample(denoiser: Denoiser, schedule: NoiseSchedule, shape, rng: np.random.Generator,
           callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Ancestral sampling from V_T ~ N(0, I); ``callback(t - 1, V)`` sees every state."""
    V = rng.standard_normal(tuple(shape))
    for t in range(schedule.T, 0, -1):
        V = _reverse_step(V, t, denoiser, schedule, rng)
        if callback is not None:
            callback(t - 1, V)
    return V


def inpaint(denoiser: Denoiser, schedule: NoiseSchedule, known: np.ndarray, mask: np.ndarray,
            rng: np.random.Generator, callback: Callable[[int, np.ndarray], None] | None = None) -> np.ndarray:
    """Mask-guided sampling: entries with mask 0 are pinned to the diffused ``known`` tensor.

    After each reverse step to t - 1, known entries are overwritten with
    q_sample(known, t - 1) (exactly ``known`` at t - 1 = 0). The overwrite noise
    comes from a child generator, so the main stream is consumed exactly as in
    :func:`sample` and an all-ones mask reproduces it.
    """
    known = np.asarray(known, dtype=np.float64)
    mask = np.asarray(mask)
    if mask.shape != known.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {known.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    free = mask.astype(bool)
    fixed = ~free
    guide_rng = rng.spawn(1)[0]
    V = rng.standard_normal(known.shape)
    for t in range(schedule.T, 0, -1):
        V = _reverse_step(V, t, denoiser, schedule, rng)
        if fixed.any():
            eps = guide_rng.standard_normal(known.shape)
            V[fixed] = q_sample(known, t - 1, eps, schedule)[fixed]
        if callback is not None:
            callback(t - 1, V)
    return V


def gaussian_oracle_denoiser(mean, var, schedule: NoiseSchedule) -> Denoiser:
    """Exact E[V0 | V_t] when V0 ~ N(mean, var) elementwise."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise ValueError("oracle variance must be positive")
    mean = np.asarray(mean, dtype=np.float64)

    def g(Vt, t):
        ab = schedule.abar(t)
        gain = np.sqrt(ab) * var / (ab * var + 1.0 - ab)
        return mean + gain * (Vt - np.sqrt(ab) * mean)

    return g


def nearest_neighbor_denoiser(dataset, schedule: NoiseSchedule) -> Denoiser:
    """Returns the dataset item X minimizing ||V_t - sqrt(abar_t) X||; ties go to the lowest index."""
    items = [np.asarray(x.data if isinstance(x, PackedTensor) else x, dtype=np.float64) for x in dataset]
    if not items:
        raise ValueError("nearest-neighbor denoiser needs a nonempty dataset")
    stack = np.stack(items)
    flat = stack.reshape(len(items), -1)

    def g(Vt, t):
        ab = schedule.abar(t)
        d = np.sum((Vt.reshape(1, -1) - np.sqrt(ab) * flat) ** 2, axis=1)
        return stack[int(np.argmin(d))].copy()

    return g


def block_mask(W: int, S: int, cells) -> np.ndarray:
    """{0,1} mask marking the full spatial blocks of the given (i, j) grid cells as free."""
    m = np.zeros(packed_shape(W, S))
    for i, j in cells:
        m[i * S:(i + 1) * S, j * S:(j + 1) * S, :] = 1.0
    return m
