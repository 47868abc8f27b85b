"""Noise schedule, Euler sampling, extreme-pose sampling and the one-sided distillation loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .core import Camera, axis_angle_to_rotmat


@dataclass(frozen=True)
class SigmaSchedule:
    sigma_min: float
    sigma_max: float
    rho: float
    steps: int
    sigmas: np.ndarray  # steps + 1 entries, the last one is the terminal 0

    def __len__(self):
        return self.steps

    @property
    def levels(self):
        return self.sigmas[:-1]


def make_schedule(sigma_min=0.002, sigma_max=80.0, rho=7.0, steps=18) -> SigmaSchedule:
    """Karras noise levels interpolated linearly in ``sigma ** (1/rho)``."""
    if not (0 < sigma_min < sigma_max):
        raise ValueError("need 0 < sigma_min < sigma_max")
    if rho <= 0:
        raise ValueError("rho must be positive")
    if steps < 2:
        raise ValueError("need at least two steps")
    i = np.arange(steps, dtype=np.float64)
    lo, hi = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    sig = (hi + i / (steps - 1) * (lo - hi)) ** rho
    # the endpoints are exact by construction; the root/power round trip alone costs ~rho ulps
    sig[0], sig[-1] = sigma_max, sigma_min
    return SigmaSchedule(float(sigma_min), float(sigma_max), float(rho), int(steps), np.append(sig, 0.0))


class Denoiser(Protocol):
    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray: ...


class ZeroDenoiser:
    def __call__(self, x, sigma):
        return np.zeros_like(x)


class IdentityDenoiser:
    def __call__(self, x, sigma):
        return x


class FixedTargetDenoiser:
    def __init__(self, target):
        self.target = np.asarray(target)

    def __call__(self, x, sigma):
        return np.broadcast_to(self.target, np.shape(x)).copy()


class LinearGaussianDenoiser:
    """Exact posterior mean for data ~ N(mean, s^2 I) under noise level sigma."""

    def __init__(self, data_std, mean=0.0):
        self.s2 = float(data_std) ** 2
        self.mean = mean

    def __call__(self, x, sigma):
        k = self.s2 / (self.s2 + sigma**2)
        return self.mean + k * (x - self.mean)


DENOISERS = {
    "zero": ZeroDenoiser,
    "identity": IdentityDenoiser,
    "fixed": FixedTargetDenoiser,
    "linear-gaussian": LinearGaussianDenoiser,
}


def add_noise(x_clean, sigma0, seed):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_clean = np.asarray(x_clean)
    if sigma0 == 0:
        return x_clean.copy()
    return x_clean + sigma0 * rng.standard_normal(x_clean.shape)


def euler_sample(x_noised, schedule: SigmaSchedule, start_index: int, denoiser: Denoiser, *, trajectory=False):
    """Deterministic Euler integration of the probability-flow ODE down to sigma = 0."""
    if not 0 <= start_index < schedule.steps:
        raise ValueError(f"start index {start_index} outside schedule of {schedule.steps} steps")
    x = np.asarray(x_noised, dtype=np.float64)
    path = [x]
    for i in range(start_index, schedule.steps):
        t_cur, t_next = schedule.sigmas[i], schedule.sigmas[i + 1]
        denoised = np.asarray(denoiser(x, t_cur))
        if denoised.shape != x.shape:
            raise ValueError(f"denoiser returned {denoised.shape}, expected {x.shape}")
        if not np.all(np.isfinite(denoised)):
            raise FloatingPointError(f"denoiser produced non-finite values at sigma {t_cur!r}")
        d_cur = (x - denoised) / t_cur
        x = x + (t_next - t_cur) * d_cur
        path.append(x)
    return (x, path) if trajectory else x


def admissible_levels(schedule: SigmaSchedule, fraction_range=(0.6, 0.8), mode="index"):
    """Start indices whose position in the noise range falls inside ``fraction_range``.

    Fractions are measured from the low-noise end: 0 is sigma_min, 1 is
    sigma_max. ``mode="index"`` measures along the schedule index,
    ``mode="sigma"`` along the sigma value itself.
    """
    lo, hi = sorted(fraction_range)
    n = schedule.steps
    if mode == "index":
        pos = 1.0 - np.arange(n) / (n - 1)
    elif mode == "sigma":
        lv = schedule.levels
        pos = (lv - schedule.sigma_min) / (schedule.sigma_max - schedule.sigma_min)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    eps = 1e-12
    idx = np.flatnonzero((pos >= lo - eps) & (pos <= hi + eps))
    if idx.size == 0:
        mid = 0.5 * (lo + hi)
        idx = np.array([int(np.argmin(np.abs(pos - mid)))])
    return idx


def pick_start_level(schedule: SigmaSchedule, fraction_range=(0.6, 0.8), seed=None, mode="index") -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = admissible_levels(schedule, fraction_range, mode)
    return int(idx[rng.integers(idx.size)])


# --------------------------------------------------------------------------
# poses


@dataclass(frozen=True)
class PoseRange:
    max_yaw: float = 45.0
    max_pitch: float = 12.5

    def sample(self, rng):
        yaw = rng.uniform(-self.max_yaw, self.max_yaw)
        pitch = rng.uniform(-self.max_pitch, self.max_pitch)
        return yaw, pitch


def orbit_camera(base: Camera, pivot, yaw_deg, pitch_deg) -> Camera:
    """Rotate the whole base pose about ``pivot``.

    Yaw turns about the base camera's vertical (image y) axis, pitch about its
    horizontal (image x) axis, both through the pivot. Intrinsics and the
    distance to the pivot are preserved.
    """
    pivot = np.asarray(pivot, dtype=np.float64)
    R = base.rotation
    rot = axis_angle_to_rotmat(R[:, 1], np.deg2rad(yaw_deg)) @ axis_angle_to_rotmat(R[:, 0], np.deg2rad(pitch_deg))
    return base.with_pose(rot @ R, pivot + rot @ (base.translation - pivot))


def sample_extreme_pose(pose_range: PoseRange, base_camera: Camera, rng, pivot) -> tuple[Camera, float, float]:
    yaw, pitch = pose_range.sample(rng)
    return orbit_camera(base_camera, pivot, yaw, pitch), yaw, pitch


# --------------------------------------------------------------------------
# crop/align hook


class CenterCropResize:
    """Linear centre crop followed by bilinear resize, with its exact adjoint."""

    def __init__(self, in_size, crop_fraction=1.0, out_size=None):
        self.in_h, self.in_w = in_size
        ch = max(1, int(round(self.in_h * crop_fraction)))
        cw = max(1, int(round(self.in_w * crop_fraction)))
        self.y0 = (self.in_h - ch) // 2
        self.x0 = (self.in_w - cw) // 2
        self.ch, self.cw = ch, cw
        self.out_h, self.out_w = out_size if out_size is not None else (ch, cw)
        self.Ry = _bilinear_matrix(ch, self.out_h)
        self.Rx = _bilinear_matrix(cw, self.out_w)

    def __call__(self, image):
        crop = image[self.y0:self.y0 + self.ch, self.x0:self.x0 + self.cw]
        return np.einsum("ay,yxc,bx->abc", self.Ry, crop, self.Rx)

    def adjoint(self, grad):
        out = np.zeros((self.in_h, self.in_w) + grad.shape[2:])
        out[self.y0:self.y0 + self.ch, self.x0:self.x0 + self.cw] = np.einsum("ay,abc,bx->yxc", self.Ry, grad, self.Rx)
        return out


def _bilinear_matrix(n_in, n_out):
    if n_in == n_out:
        return np.eye(n_in)
    pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    M = np.zeros((n_out, n_in))
    M[np.arange(n_out), i0] += 1 - w
    M[np.arange(n_out), i1] += w
    return M


class IdentityAlign:
    def __call__(self, image):
        return image

    def adjoint(self, grad):
        return grad


# --------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class SDSResult:
    loss: float
    grad: np.ndarray  # cotangent for x_clean
    denoised: np.ndarray
    start_index: int


def sds_loss(x_clean, schedule: SigmaSchedule, denoiser: Denoiser, seed, *, fraction_range=(0.6, 0.8),
             mode="index", start_index=None) -> SDSResult:
    """L2 distance to a denoised copy of ``x_clean``; the copy is a constant target."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_clean = np.asarray(x_clean, dtype=np.float64)
    if not np.all(np.isfinite(x_clean)):
        raise ValueError("render is not finite")
    i0 = pick_start_level(schedule, fraction_range, rng, mode) if start_index is None else int(start_index)
    x_noised = add_noise(x_clean, schedule.sigmas[i0], rng)
    target = euler_sample(x_noised, schedule, i0, denoiser)
    if not np.all(np.isfinite(target)):
        raise FloatingPointError("denoiser produced non-finite values")
    diff = x_clean - target
    return SDSResult(float(np.mean(diff**2)), 2.0 * diff / diff.size, target, i0)
