"""Seeded synthetic scenes and clips for oracle checks and self-consistency runs."""
from __future__ import annotations

import numpy as np

from .core import Camera, PixelSplatGrid, SplatParams, inverse_softplus, logit


def default_camera(width=32, height=32, focal=None) -> Camera:
    f = focal if focal is not None else 1.2 * max(width, height)
    return Camera(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def random_params(n, camera: Camera, rng, *, dtype=np.float64, depth=(1.0, 4.0), scale=(0.02, 0.25),
                  opacity=(0.05, 0.95), behind=0.0, background=True) -> SplatParams:
    """Random raw splats inside the camera frustum.

    ``behind`` is the fraction of splats placed behind the near plane.
    """
    px = rng.uniform([-2, -2], [camera.width + 1, camera.height + 1], size=(n, 2))
    d = rng.uniform(*depth, size=n)
    p_cam = np.stack([(px[:, 0] - camera.cx) / camera.fx * d, (px[:, 1] - camera.cy) / camera.fy * d, d], axis=1)
    flip = rng.random(n) < behind
    p_cam[flip, 2] *= -1
    q = rng.normal(size=(n, 4))
    q *= rng.uniform(0.5, 1.5, size=(n, 1)) / np.linalg.norm(q, axis=1, keepdims=True)
    bg = rng.uniform(0, 1, size=(camera.height, camera.width, 3)) if background else None
    return SplatParams(
        camera.camera_to_world(p_cam).astype(dtype),
        q.astype(dtype),
        np.log(rng.uniform(*scale, size=(n, 3))).astype(dtype),
        logit(rng.uniform(*opacity, size=n)).astype(dtype),
        rng.normal(0, 1.5, size=(n, 3)).astype(dtype),
        None if bg is None else bg.astype(dtype),
    )


def orbit_cameras(base: Camera, pivot, yaws_deg, pitches_deg):
    """Cameras orbiting ``pivot`` by yaw about the base up axis, pitch about its right axis."""
    from .diffusion import orbit_camera

    return [orbit_camera(base, pivot, y, p) for y, p in zip(yaws_deg, pitches_deg)]


def face_grid(size=24, *, seed=0, depth=1.0, focal=None) -> tuple[PixelSplatGrid, Camera]:
    """A smooth pixel-aligned "head" scene: a bulged disc over a textured background."""
    rng = np.random.default_rng(seed)
    cam = default_camera(size, size, focal)
    v, u = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.hypot((u - cam.cx) / (size / 2), (v - cam.cy) / (size / 2))
    inside = r < 0.8
    z = depth - 0.15 * np.sqrt(np.clip(1 - (r / 0.8) ** 2, 0, 1)) * inside
    z = np.where(inside, z, depth + 0.3)
    footprint = z / cam.fx
    scale = np.log(0.7 * footprint)[..., None].repeat(3, axis=2) + rng.normal(0, 0.05, (size, size, 3))
    opacity = np.where(inside, 0.92, 0.15) + rng.uniform(-0.03, 0.03, (size, size))
    color = np.stack([
        0.55 + 0.30 * np.cos(2.1 * u / size * np.pi),
        0.45 + 0.25 * np.sin(3.3 * v / size * np.pi),
        0.40 + 0.20 * np.cos(1.7 * (u + v) / size * np.pi),
    ], axis=-1)
    color = np.clip(color + rng.normal(0, 0.03, color.shape), 0.05, 0.95)
    q = np.zeros((size, size, 4))
    q[..., 0] = 1.0
    q += rng.normal(0, 0.1, q.shape)
    bg = np.stack([0.2 + 0.6 * u / size, 0.3 + 0.4 * v / size, 0.5 + 0.2 * np.sin(u / 3.0)], axis=-1)
    grid = PixelSplatGrid(
        opacity_raw=logit(opacity),
        scale_raw=scale,
        depth_raw=inverse_softplus(z),
        offset=rng.normal(0, 0.002, (size, size, 3)),
        rotation_raw=q,
        color_raw=logit(color),
        background=np.clip(bg, 0, 1),
    )
    return grid, cam


def perturb_grid(grid: PixelSplatGrid, rng, *, strength=1.0) -> PixelSplatGrid:
    s = strength
    H, W = grid.shape
    return grid.replace(
        opacity_raw=grid.opacity_raw + s * rng.normal(0, 0.3, (H, W)),
        scale_raw=grid.scale_raw + s * rng.normal(0, 0.1, (H, W, 3)),
        depth_raw=grid.depth_raw + s * rng.normal(0, 0.03, (H, W)),
        offset=grid.offset + s * rng.normal(0, 0.002, (H, W, 3)),
        rotation_raw=grid.rotation_raw + s * rng.normal(0, 0.1, (H, W, 4)),
        color_raw=grid.color_raw + s * rng.normal(0, 0.3, (H, W, 3)),
        background=np.clip(grid.background + s * rng.normal(0, 0.05, (H, W, 3)), 0, 1),
    )


def base_orbit(cam: Camera, n_frames: int, *, pivot=(0.0, 0.0, 1.0), max_yaw=8.0, max_pitch=5.0):
    k = np.arange(n_frames)
    yaws = max_yaw * np.sin(2 * np.pi * k / max(n_frames, 1))
    pitches = max_pitch * np.sin(4 * np.pi * k / max(n_frames, 1) + 0.5) * (k > 0)
    return orbit_cameras(cam, np.asarray(pivot), yaws, pitches)


def mouth_weights(grid: PixelSplatGrid, camera: Camera, centre=(0.5, 0.7), radius=0.22):
    """Per-pixel blob weights for a localised moving region, in flat splat order."""
    H, W = grid.shape
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d2 = ((u / W - centre[0]) ** 2 + (v / H - centre[1]) ** 2) / radius**2
    return np.exp(-d2).reshape(-1)


def driving_signal(n_frames, fps=25.0, freq=1.3, phase=0.3):
    t = np.arange(n_frames) / fps
    return np.sin(2 * np.pi * freq * t + phase)


def motion_clip(size=24, n_frames=16, *, seed=0, amplitude=2.0, fps=25.0, freq=1.3, orbit=True):
    """Frames of a known grid whose mouth blob moves with a sinusoidal driving signal.

    The blob moves along the source camera's image-down axis by up to
    ``amplitude`` pixel footprints. The 1-D "audio" feature is the driving
    signal itself, sampled at the frame rate. Returns
    ``(frames, cameras, features, grid, offsets)`` with one offset array per frame.
    """
    from .core import lift_grid_params
    from .rasterizer import rasterize

    grid, cam = face_grid(size, seed=seed)
    cams = base_orbit(cam, n_frames, max_yaw=4.0, max_pitch=2.5) if orbit else [cam] * n_frames
    splats = lift_grid_params(grid, cam).activate()
    w = mouth_weights(grid, cam)
    signal = driving_signal(n_frames, fps, freq)
    down = cam.rotation[:, 1]
    step = amplitude * float(np.median(grid.depth())) / cam.fx
    offsets = [step * (s - signal[0]) * w[:, None] * down[None, :] for s in signal]
    frames = np.stack([
        rasterize(splats.with_positions(splats.positions + d), c).composite("predicted").color
        for d, c in zip(offsets, cams)
    ])
    return frames, cams, signal[:, None].copy(), grid, offsets
