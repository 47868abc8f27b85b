"""Domain types, camera geometry, parameter activations and pixel-grid lifting.

Conventions used throughout the package:

* Camera frame is OpenCV-style: x right, y down, z forward.
* Pixel ``(u, v)`` samples the image plane at integer coordinates, ``u`` the
  column and ``v`` the row; flat splat index ``k`` maps to ``(k % W, k // W)``.
* Depth is z-distance along the optical axis, so rays are scaled to ``z = 1``.
* Quaternions are stored ``(w, x, y, z)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

QUAT_TOL = 1e-5


class ShapeError(ValueError):
    """Array shapes or resolutions disagree."""


class BoundsError(ValueError):
    """A pixel coordinate lies outside the image."""


class ValidationError(ValueError):
    """A value violates a type invariant."""


class DivergenceError(RuntimeError):
    """An optimisation produced a non-finite loss or gradient."""


# --------------------------------------------------------------------------
# activations


def sigmoid(x):
    x = np.asarray(x)
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def logit(p):
    p = np.asarray(p)
    return np.log(p) - np.log1p(-p)


def softplus(x):
    x = np.asarray(x)
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def inverse_softplus(y):
    y = np.asarray(y)
    return y + np.log(-np.expm1(-y))


def normalize_quaternions(q):
    q = np.asarray(q)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical_quaternions(q):
    """Flip sign so that w >= 0 (q and -q encode the same rotation)."""
    q = np.array(q, copy=True)
    q[q[..., 0] < 0] *= -1
    return q


def quat_to_rotmat(q):
    """Rotation matrices for unit quaternions ``(..., 4)`` in wxyz order."""
    q = np.asarray(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def axis_angle_to_rotmat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def covariance(rotation, scale):
    """3D covariance ``R diag(s)^2 R^T`` for one or many splats.

    ``rotation`` must be unit quaternions (wxyz); ``scale`` positive.
    """
    rotation = np.asarray(rotation)
    scale = np.asarray(scale)
    norms = np.linalg.norm(rotation, axis=-1)
    if np.any(np.abs(norms - 1) > QUAT_TOL):
        raise ValidationError("covariance expects unit quaternions")
    if np.any(scale <= 0):
        raise ValidationError("covariance expects positive scales")
    R = quat_to_rotmat(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# --------------------------------------------------------------------------
# camera


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be at least 1x1")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            raise ValidationError("world_from_camera rotation is not orthonormal")

    @classmethod
    def from_matrix(cls, fx, fy, cx, cy, width, height, world_from_camera):
        T = np.asarray(world_from_camera, dtype=np.float64).reshape(4, 4)
        return cls(fx, fy, cx, cy, int(width), int(height), T[:3, :3], T[:3, 3])

    @classmethod
    def look_at(cls, eye, target, up, *, fx, fy, cx, cy, width, height):
        """Camera at ``eye`` looking at ``target``; ``up`` maps to image -y."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, -np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls(fx, fy, cx, cy, width, height, np.stack([x, y, z], axis=1), eye)

    @property
    def world_from_camera(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    @property
    def center(self):
        return self.translation

    def world_to_camera(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation

    def camera_to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def with_pose(self, rotation, translation):
        return replace(self, rotation=rotation, translation=translation)

    def pixel_grid(self):
        """Integer pixel coordinates ``(H*W, 2)`` in flat splat order."""
        v, u = np.divmod(np.arange(self.width * self.height), self.width)
        return np.stack([u, v], axis=1).astype(np.float64)


def ray_direction(camera: Camera, px):
    """Camera-frame ray through pixel ``px`` scaled so that z = 1.

    ``px`` may be a single ``(u, v)`` pair or an ``(M, 2)`` array.
    """
    px = np.asarray(px, dtype=np.float64)
    u, v = px[..., 0], px[..., 1]
    inside = (u >= -0.5) & (u <= camera.width - 0.5) & (v >= -0.5) & (v <= camera.height - 0.5)
    if not np.all(inside):
        raise BoundsError("pixel outside image bounds")
    return np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)


def project_points(camera: Camera, points_cam):
    """Pinhole projection of camera-frame points to pixel coordinates."""
    p = np.asarray(points_cam)
    return np.stack(
        [camera.fx * p[..., 0] / p[..., 2] + camera.cx, camera.fy * p[..., 1] / p[..., 2] + camera.cy],
        axis=-1,
    )


# --------------------------------------------------------------------------
# splats


def _check_background(bg):
    if bg is None:
        return None
    bg = np.asarray(bg)
    if bg.ndim != 3 or bg.shape[2] != 3:
        raise ShapeError(f"background must be (H, W, 3), got {bg.shape}")
    return bg


@dataclass(frozen=True)
class SplatSet:
    """Activated splats: N Gaussians plus an optional 2D background image."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    background: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.positions)
        shapes = {
            "positions": (n, 3),
            "rotations": (n, 4),
            "scales": (n, 3),
            "opacities": (n,),
            "colors": (n, 3),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {np.shape(getattr(self, name))}")
        object.__setattr__(self, "background", _check_background(self.background))
        if n:
            if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1) > QUAT_TOL):
                raise ValidationError("rotations must be unit quaternions")
            if np.any(self.scales <= 0):
                raise ValidationError("scales must be positive")
            if np.any((self.opacities <= 0) | (self.opacities >= 1)):
                raise ValidationError("opacities must lie in (0, 1)")

    def __len__(self):
        return len(self.positions)

    @property
    def dtype(self):
        return np.asarray(self.positions).dtype

    @classmethod
    def empty(cls, background=None, dtype=np.float64):
        z = lambda *s: np.zeros((0,) + s, dtype=dtype)  # noqa: E731
        return cls(z(3), z(4), z(3), z(), z(3), background)

    def astype(self, dtype):
        bg = None if self.background is None else self.background.astype(dtype)
        return SplatSet(
            self.positions.astype(dtype),
            self.rotations.astype(dtype),
            self.scales.astype(dtype),
            self.opacities.astype(dtype),
            self.colors.astype(dtype),
            bg,
        )

    def with_positions(self, positions):
        return replace(self, positions=positions)


@dataclass(frozen=True)
class SplatParams:
    """Unconstrained splat parameters; ``activate`` maps them to a SplatSet.

    Activations: rotation L2-normalised, scale exp, opacity and colour sigmoid.
    Positions and background are used as-is.
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    background: np.ndarray | None = None

    FIELDS = ("positions", "rotations", "scales", "opacities", "colors", "background")

    def __len__(self):
        return len(self.positions)

    @property
    def dtype(self):
        return np.asarray(self.positions).dtype

    def activate(self) -> SplatSet:
        return SplatSet(
            self.positions,
            normalize_quaternions(self.rotations),
            np.exp(self.scales),
            sigmoid(self.opacities),
            sigmoid(self.colors),
            self.background,
        )

    @classmethod
    def from_splats(cls, splats: SplatSet) -> "SplatParams":
        return cls(
            splats.positions,
            splats.rotations,
            np.log(splats.scales),
            logit(splats.opacities),
            logit(np.clip(splats.colors, 1e-6, 1 - 1e-6)),
            splats.background,
        )

    def as_dict(self):
        d = {k: getattr(self, k) for k in self.FIELDS}
        if d["background"] is None:
            del d["background"]
        return d

    def replace(self, **arrays):
        return replace(self, **arrays)


@dataclass(frozen=True)
class PixelSplatGrid:
    """Per-pixel raw splat attributes aligned to a source image.

    Arrays are ``(H, W, k)``; opacity and depth are ``(H, W)``.
    """

    opacity_raw: np.ndarray
    scale_raw: np.ndarray
    depth_raw: np.ndarray
    offset: np.ndarray
    rotation_raw: np.ndarray
    color_raw: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        H, W = np.shape(self.depth_raw)[:2]
        shapes = {
            "opacity_raw": (H, W),
            "scale_raw": (H, W, 3),
            "depth_raw": (H, W),
            "offset": (H, W, 3),
            "rotation_raw": (H, W, 4),
            "color_raw": (H, W, 3),
            "background": (H, W, 3),
        }
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {np.shape(getattr(self, name))}")

    @property
    def shape(self):
        return np.shape(self.depth_raw)

    FIELDS = ("opacity_raw", "scale_raw", "depth_raw", "offset", "rotation_raw", "color_raw", "background")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}

    def replace(self, **arrays):
        return replace(self, **arrays)

    def depth(self):
        return softplus(self.depth_raw)


def lift_grid_params(grid: PixelSplatGrid, camera: Camera) -> SplatParams:
    """World-space raw splat parameters, one splat per grid pixel."""
    H, W = grid.shape
    if (H, W) != (camera.height, camera.width):
        raise ShapeError(f"grid {W}x{H} does not match camera {camera.width}x{camera.height}")
    rays = ray_direction(camera, camera.pixel_grid())
    p_cam = rays * softplus(grid.depth_raw).reshape(-1, 1) + grid.offset.reshape(-1, 3)
    return SplatParams(
        camera.camera_to_world(p_cam),
        grid.rotation_raw.reshape(-1, 4),
        grid.scale_raw.reshape(-1, 3),
        grid.opacity_raw.reshape(-1),
        grid.color_raw.reshape(-1, 3),
        grid.background,
    )


def lift_grid(grid: PixelSplatGrid, camera: Camera) -> SplatSet:
    """Activated world-space splats: position = ray * softplus(d) + offset."""
    return lift_grid_params(grid, camera).activate()


def lift_grid_backward(grid: PixelSplatGrid, camera: Camera, grads) -> dict:
    """Map raw splat-parameter gradients back onto grid fields.

    ``grads`` carries the SplatParams fields (e.g. a GradBuffer).
    """
    H, W = grid.shape
    rays = ray_direction(camera, camera.pixel_grid())
    g_cam = np.asarray(grads.positions) @ camera.rotation  # R^T g per row
    d_depth = np.sum(g_cam * rays, axis=1) * sigmoid(grid.depth_raw.reshape(-1))
    out = {
        "opacity_raw": np.asarray(grads.opacities).reshape(H, W),
        "scale_raw": np.asarray(grads.scales).reshape(H, W, 3),
        "depth_raw": d_depth.reshape(H, W),
        "offset": g_cam.reshape(H, W, 3),
        "rotation_raw": np.asarray(grads.rotations).reshape(H, W, 4),
        "color_raw": np.asarray(grads.colors).reshape(H, W, 3),
    }
    bg = getattr(grads, "background", None)
    out["background"] = np.zeros_like(grid.background) if bg is None else np.asarray(bg)
    return out
