"""Hand-derived reverse-mode gradients of the renderer, plus a finite-difference checker."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .core import Camera, ShapeError, SplatParams, SplatSet, quat_to_rotmat
from .rasterizer import ALPHA_MAX, TILE, Raster, fragment_state, rasterize, resolve_background, set_workers

GROUPS = ("positions", "rotations", "scales", "opacities", "colors", "background")


@dataclass(frozen=True)
class GradBuffer:
    """Gradients with respect to the raw SplatParams fields."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    background: np.ndarray | None = None

    def as_dict(self):
        d = {k: getattr(self, k) for k in GROUPS}
        if d["background"] is None:
            del d["background"]
        return d

    def __add__(self, other: "GradBuffer") -> "GradBuffer":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b

        return GradBuffer(*(add(getattr(self, k), getattr(other, k)) for k in GROUPS))

    def scale(self, s: float) -> "GradBuffer":
        return GradBuffer(*(None if getattr(self, k) is None else getattr(self, k) * s for k in GROUPS))

    @classmethod
    def zeros_like(cls, params: SplatParams):
        bg = None if params.background is None else np.zeros_like(params.background)
        return cls(*(np.zeros_like(getattr(params, k)) for k in GROUPS[:-1]), bg)


def _rotmat_vjp(q, dR):
    """Gradient w.r.t. unit quaternion (wxyz) given dL/dR for R = R(q)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def rasterize_backward(raster: Raster, params: SplatParams, d_color, d_trans, *,
                       workers: int | None = None) -> GradBuffer:
    """Backward of the background-free rasterisation.

    ``d_color`` (H, W, 3) is the cotangent of the splat colour sum and
    ``d_trans`` (H, W) that of the final transmittance. The returned buffer
    has no background entry.
    """
    proj, bins, cam = raster.projection, raster.bins, raster.camera
    dtype = params.dtype
    n = len(params)
    out = GradBuffer(
        np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)), None
    )
    if len(bins.pair_splat) == 0:
        return GradBuffer(*(None if a is None else a.astype(dtype) for a in
                            (out.positions, out.rotations, out.scales, out.opacities, out.colors, None)))

    f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    means, conics = f64(proj.means), f64(proj.conics)
    opac, colors = f64(proj.opacities), f64(proj.colors)
    pair_grad = np.zeros((len(bins.pair_splat), 9))
    set_workers(workers)
    _kernels.composite_tiles_backward(bins.tile_start, bins.pair_splat, means, conics, opac, colors,
                                      cam.width, cam.height, bins.tiles_x, TILE, ALPHA_MAX,
                                      f64(d_color), f64(d_trans), pair_grad)
    g = np.zeros((len(proj), 9))
    _kernels.reduce_pairs(bins.pair_splat, pair_grad, g)

    g_mean, g_conic, g_opac, g_col = g[:, 0:2], g[:, 2:5], g[:, 5], g[:, 6:9]
    t = f64(proj.t_cam)
    M, cov3d = f64(proj.M), f64(proj.cov3d)
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = cam.fx, cam.fy

    # conic = inverse(cov2d): dL/dcov = -A G A
    A = np.empty((len(proj), 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = conics[:, 0], conics[:, 1], conics[:, 1], conics[:, 2]
    Gm = np.empty_like(A)
    Gm[:, 0, 0], Gm[:, 1, 1] = g_conic[:, 0], g_conic[:, 2]
    Gm[:, 0, 1] = Gm[:, 1, 0] = 0.5 * g_conic[:, 1]
    GC = -A @ Gm @ A

    # cov2d = M cov3d M^T + low-pass
    Mt = np.swapaxes(M, 1, 2)
    d_cov3d = Mt @ GC @ M
    d_M = 2.0 * GC @ M @ cov3d
    Wc = cam.rotation.T  # world -> camera
    d_J = d_M @ Wc.T

    dtx = -fx / z**2 * d_J[:, 0, 2] + g_mean[:, 0] * fx / z
    dty = -fy / z**2 * d_J[:, 1, 2] + g_mean[:, 1] * fy / z
    dtz = (-fx / z**2 * d_J[:, 0, 0] + 2 * fx * x / z**3 * d_J[:, 0, 2]
           - fy / z**2 * d_J[:, 1, 1] + 2 * fy * y / z**3 * d_J[:, 1, 2]
           - g_mean[:, 0] * fx * x / z**2 - g_mean[:, 1] * fy * y / z**2)
    d_t = np.stack([dtx, dty, dtz], axis=1)
    d_pos = d_t @ Wc

    # cov3d = R diag(s^2) R^T
    keep = proj.index
    q_raw = f64(params.rotations[keep])
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / q_norm
    R = quat_to_rotmat(q)
    s = np.exp(f64(params.scales[keep]))
    RtGR = np.swapaxes(R, 1, 2) @ d_cov3d @ R
    d_scale_raw = 2.0 * s**2 * np.diagonal(RtGR, axis1=1, axis2=2)
    d_R = 2.0 * d_cov3d @ R * (s**2)[:, None, :]
    d_q = _rotmat_vjp(q, d_R)
    d_q_raw = (d_q - q * np.sum(q * d_q, axis=1, keepdims=True)) / q_norm

    o = opac
    c = colors
    out.positions[keep] = d_pos
    out.rotations[keep] = d_q_raw
    out.scales[keep] = d_scale_raw
    out.opacities[keep] = g_opac * o * (1 - o)
    out.colors[keep] = g_col * c * (1 - c)
    return GradBuffer(out.positions.astype(dtype), out.rotations.astype(dtype), out.scales.astype(dtype),
                      out.opacities.astype(dtype), out.colors.astype(dtype), None)


def composite_backward(raster: Raster, background, d_image):
    """Split an image cotangent into (d_color, d_trans, d_background)."""
    bg = resolve_background(raster.splats, raster.camera, background)
    d_image = np.asarray(d_image, dtype=np.float64)
    d_trans = np.sum(d_image * bg, axis=2)
    d_bg = d_image * raster.transmittance[..., None] if isinstance(background, str) else None
    return d_image, d_trans, d_bg


def render_backward(splats: SplatSet | SplatParams, camera: Camera, background, dL_dimage, *,
                    workers: int | None = None, raster: Raster | None = None) -> GradBuffer:
    """Gradient of ``sum(dL_dimage * render(...).color)`` w.r.t. raw parameters.

    A SplatSet is treated as raw parameters at its activated values (unit
    quaternions, log scales, logit opacities and colours).
    """
    params = splats if isinstance(splats, SplatParams) else SplatParams.from_splats(splats)
    dL_dimage = np.asarray(dL_dimage)
    if dL_dimage.shape != (camera.height, camera.width, 3):
        raise ShapeError(f"cotangent {dL_dimage.shape} does not match camera")
    if not np.all(np.isfinite(dL_dimage)):
        raise ValueError("cotangent must be finite")
    if raster is None:
        raster = rasterize(params.activate(), camera, workers=workers)
    d_color, d_trans, d_bg = composite_backward(raster, background, dL_dimage)
    grads = rasterize_backward(raster, params, d_color, d_trans, workers=workers)
    if params.background is not None:
        bg = np.zeros_like(params.background) if d_bg is None else d_bg.astype(params.dtype)
        grads = GradBuffer(grads.positions, grads.rotations, grads.scales, grads.opacities, grads.colors, bg)
    return grads


# --------------------------------------------------------------------------
# finite differences


def linear_loss(cotangent):
    """Loss ``sum(cotangent * image)`` with its image gradient."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    return lambda image: (float(np.sum(cotangent * image)), cotangent)


@dataclass
class GroupReport:
    name: str
    checked: int
    skipped: int
    max_rel: float
    mean_rel: float
    fraction_within: float
    passed: bool


@dataclass
class FDReport:
    groups: dict = field(default_factory=dict)
    tolerance: float = 0.0

    @property
    def passed(self):
        return all(g.passed for g in self.groups.values())

    def table(self):
        lines = [f"{'group':<11} {'checked':>7} {'skipped':>7} {'max_rel':>10} {'mean_rel':>10} {'within':>7}  status"]
        for g in self.groups.values():
            lines.append(f"{g.name:<11} {g.checked:>7d} {g.skipped:>7d} {g.max_rel:>10.3e} {g.mean_rel:>10.3e} "
                         f"{g.fraction_within:>7.3f}  {'PASS' if g.passed else 'FAIL'}")
        return "\n".join(lines)


def _states_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(params: SplatParams, camera: Camera, loss, *, groups=GROUPS, h_rel=1e-5,
                      tolerance=1e-4, background="predicted", coverage=0.99, worst=1e-2,
                      floor=1e-8) -> FDReport:
    """Compare analytic gradients with central differences, coordinate by coordinate.

    Relative error is ``|a - f| / max(|a|, |f|, floor * scale)`` where
    ``scale`` is the largest analytic gradient magnitude. Coordinates whose
    perturbation changes culling, depth order, truncation or clamping are
    skipped. A group passes when at least ``coverage`` of its coordinates are
    strictly below ``tolerance`` and none exceeds ``max(worst, tolerance)``.
    """
    def evaluate(p):
        value, grad = loss(render_image(p))
        if not np.isfinite(value):
            raise ValueError("loss is not finite")
        return value, grad

    def render_image(p):
        return rasterize(p.activate(), camera).composite(background).color

    _, d_image = evaluate(params)
    analytic = render_backward(params, camera, background, d_image)
    base_state = fragment_state(params.activate(), camera)
    scale = max(max(float(np.max(np.abs(v), initial=0.0)) for v in analytic.as_dict().values()), 1e-300)

    report = FDReport(tolerance=tolerance)
    for name in groups:
        base = getattr(params, name)
        if base is None:
            continue
        a_grad = getattr(analytic, name)
        errors = []
        skipped = 0
        flat = base.reshape(-1)
        for i in range(flat.size):
            h = h_rel * max(1.0, abs(float(flat[i])))
            vals = []
            ok = True
            for sign in (1.0, -1.0):
                arr = base.copy().reshape(-1)
                arr[i] += sign * h
                p = params.replace(**{name: arr.reshape(base.shape)})
                if name != "background" and not _states_equal(fragment_state(p.activate(), camera), base_state):
                    ok = False
                    break
                vals.append(evaluate(p)[0])
            if not ok:
                skipped += 1
                continue
            fd = (vals[0] - vals[1]) / (2 * h)
            a = float(a_grad.reshape(-1)[i])
            errors.append(abs(a - fd) / max(abs(a), abs(fd), floor * scale))
        errors = np.asarray(errors)
        within = float(np.mean(errors < tolerance)) if errors.size else 1.0
        max_rel = float(errors.max()) if errors.size else 0.0
        passed = tolerance > 0 and within >= coverage and max_rel <= max(worst, tolerance)
        report.groups[name] = GroupReport(name, int(errors.size), skipped, max_rel,
                                          float(errors.mean()) if errors.size else 0.0, within, passed)
    return report
