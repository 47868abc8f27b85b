"""Projection, tile binning and front-to-back compositing of Gaussian splats."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np

from . import _kernels
from .core import Camera, ShapeError, SplatParams, SplatSet, covariance

TILE = 16
ALPHA_MAX = 0.999
Z_NEAR = 0.01
LOW_PASS = 0.3
CUTOFF = _kernels.CUTOFF
DEPTH_EPS = 1e-10


@dataclass(frozen=True)
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    opacity: float
    color: np.ndarray
    index: int


@dataclass(frozen=True)
class Projection:
    """Screen-space footprints of the splats that survived near-plane culling.

    All arrays are indexed by retained splat; ``index`` maps back to the
    source SplatSet. ``conics`` stores the inverse 2D covariance as (a, b, c)
    for ``[[a, b], [b, c]]``.
    """

    means: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray
    depths: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    index: np.ndarray
    # camera-frame centres and EWA factor, kept for the backward pass
    t_cam: np.ndarray
    M: np.ndarray
    cov3d: np.ndarray
    culled: int

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i) -> ProjectedSplat:
        return ProjectedSplat(self.means[i], self.cov2d[i], float(self.depths[i]),
                              float(self.opacities[i]), self.colors[i], int(self.index[i]))

    def sort_order(self):
        """Retained-splat order by (view depth, source index)."""
        return np.lexsort((self.index, self.depths))


@dataclass(frozen=True)
class RenderOutput:
    color: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray
    # diagnostics: final transmittance and sum of blending weights
    transmittance: np.ndarray
    weight_sum: np.ndarray


def project(splats: SplatSet, camera: Camera) -> Projection:
    """EWA projection of every splat in front of the near plane."""
    dtype = splats.dtype
    W = camera.rotation.T.astype(dtype)
    t_all = (splats.positions - camera.translation.astype(dtype)) @ W.T
    keep = np.flatnonzero(t_all[:, 2] > Z_NEAR)
    t = t_all[keep]
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    fx, fy = dtype.type(camera.fx), dtype.type(camera.fy)
    means = np.stack([fx * x / z + camera.cx, fy * y / z + camera.cy], axis=1).astype(dtype)

    J = np.zeros((len(keep), 2, 3), dtype=dtype)
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    M = J @ W
    cov3d = covariance(splats.rotations[keep], splats.scales[keep]) if len(keep) else np.zeros((0, 3, 3), dtype)
    cov2d = M @ cov3d @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += LOW_PASS
    cov2d[:, 1, 1] += LOW_PASS
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)
    return Projection(
        means=means,
        cov2d=cov2d,
        conics=conics,
        depths=z.copy(),
        opacities=splats.opacities[keep],
        colors=splats.colors[keep],
        index=keep,
        t_cam=t,
        M=M,
        cov3d=cov3d,
        culled=len(splats) - len(keep),
    )


def composite_pixel(fragments, background):
    """Front-to-back compositing of one pixel.

    ``fragments`` is a sequence of ``(opacity, weight, color[, depth])``
    already sorted front to back. Returns ``(color, alpha, depth)``.
    """
    background = np.asarray(background, dtype=np.float64)
    T = 1.0
    color = np.zeros(3)
    depth = 0.0
    prev = -np.inf
    for frag in fragments:
        opacity, weight, c = frag[0], frag[1], np.asarray(frag[2], dtype=np.float64)
        d = frag[3] if len(frag) > 3 else 0.0
        assert d >= prev, "fragments must be sorted front to back"
        prev = d
        a = min(max(opacity * weight, 0.0), ALPHA_MAX)
        color += c * a * T
        depth += d * a * T
        T *= 1.0 - a
    alpha = 1.0 - T
    return color + background * T, alpha, depth / max(alpha, DEPTH_EPS)


# --------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileBins:
    tiles_x: int
    tiles_y: int
    tile_start: np.ndarray
    pair_splat: np.ndarray  # index into the Projection arrays


def bin_tiles(proj: Projection, width: int, height: int, tile: int = TILE) -> TileBins:
    """Assign footprints to tiles by the bounding box of their 3-sigma ellipse."""
    tiles_x = -(-width // tile)
    tiles_y = -(-height // tile)
    n_tiles = tiles_x * tiles_y
    if len(proj) == 0:
        return TileBins(tiles_x, tiles_y, np.zeros(n_tiles + 1, np.int64), np.zeros(0, np.int64))
    m = proj.means.astype(np.float64)
    rx = 3.0 * np.sqrt(proj.cov2d[:, 0, 0].astype(np.float64))
    ry = 3.0 * np.sqrt(proj.cov2d[:, 1, 1].astype(np.float64))
    # one pixel of slack; pixels outside the ellipse get zero weight anyway
    x0 = np.floor(m[:, 0] - rx) - 1
    x1 = np.ceil(m[:, 0] + rx) + 1
    y0 = np.floor(m[:, 1] - ry) - 1
    y1 = np.ceil(m[:, 1] + ry) + 1
    ok = (x1 >= 0) & (x0 <= width - 1) & (y1 >= 0) & (y0 <= height - 1) & np.isfinite(rx) & np.isfinite(ry)
    tx0 = (np.clip(x0, 0, width - 1) // tile).astype(np.int64)
    tx1 = (np.clip(x1, 0, width - 1) // tile).astype(np.int64)
    ty0 = (np.clip(y0, 0, height - 1) // tile).astype(np.int64)
    ty1 = (np.clip(y1, 0, height - 1) // tile).astype(np.int64)
    nx = np.where(ok, tx1 - tx0 + 1, 0)
    ny = np.where(ok, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    splat = np.repeat(np.arange(len(proj)), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    lx = local % nx[splat]
    ly = local // nx[splat]
    tile_id = (ty0[splat] + ly) * tiles_x + tx0[splat] + lx
    order = np.lexsort((proj.index[splat], proj.depths[splat], tile_id))
    tile_id = tile_id[order]
    splat = splat[order]
    tile_start = np.searchsorted(tile_id, np.arange(n_tiles + 1)).astype(np.int64)
    return TileBins(tiles_x, tiles_y, tile_start, splat.astype(np.int64))


def set_workers(workers: int | None):
    if workers is None:
        workers = int(os.environ.get("SPLATKIT_WORKERS", numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(max(1, min(workers, numba.config.NUMBA_NUM_THREADS)))


# --------------------------------------------------------------------------
# forward


@dataclass(frozen=True)
class Raster:
    """Background-free rasterisation: splat colour sum and transmittance.

    ``composite`` adds a background; the same Raster serves several
    backgrounds without re-rendering.
    """

    splats: SplatSet
    camera: Camera
    projection: Projection
    bins: TileBins
    color: np.ndarray  # sum_i c_i alpha_i T_i
    transmittance: np.ndarray
    weight_sum: np.ndarray
    depth_sum: np.ndarray

    def composite(self, background="predicted") -> RenderOutput:
        bg = resolve_background(self.splats, self.camera, background)
        dtype = self.splats.dtype
        T = self.transmittance
        alpha = 1.0 - T
        color = self.color + bg * T[..., None]
        depth = self.depth_sum / np.maximum(alpha, DEPTH_EPS)
        return RenderOutput(color.astype(dtype), alpha.astype(dtype), depth.astype(dtype),
                            T.astype(dtype), self.weight_sum.astype(dtype))


def resolve_background(splats: SplatSet, camera: Camera, background):
    """Background image for ``"predicted"`` or a solid RGB triple."""
    shape = (camera.height, camera.width, 3)
    if isinstance(background, str):
        if background != "predicted":
            raise ValueError(f"unknown background mode {background!r}")
        if splats.background is None:
            raise ShapeError("predicted background requested but the scene has none")
        if splats.background.shape != shape:
            raise ShapeError(f"background {splats.background.shape} does not match camera {shape}")
        return splats.background.astype(np.float64)
    rgb = np.asarray(background, dtype=np.float64)
    if rgb.shape == (3,):
        return np.broadcast_to(rgb, shape)
    if rgb.shape != shape:
        raise ShapeError(f"background {rgb.shape} does not match camera {shape}")
    return rgb


def _kernel_inputs(proj: Projection):
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    return f(proj.means), f(proj.conics), f(proj.opacities), f(proj.colors), f(proj.depths)


def rasterize(splats: SplatSet | SplatParams, camera: Camera, *, workers: int | None = None) -> Raster:
    if isinstance(splats, SplatParams):
        splats = splats.activate()
    proj = project(splats, camera)
    W, H = camera.width, camera.height
    bins = bin_tiles(proj, W, H)
    color = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    wsum = np.zeros((H, W))
    dsum = np.zeros((H, W))
    if len(bins.pair_splat):
        set_workers(workers)
        means, conics, opac, colors, depths = _kernel_inputs(proj)
        _kernels.composite_tiles(bins.tile_start, bins.pair_splat, means, conics, opac, colors, depths,
                                 W, H, bins.tiles_x, TILE, ALPHA_MAX, color, trans, wsum, dsum)
    return Raster(splats, camera, proj, bins, color, trans, wsum, dsum)


def render(splats: SplatSet | SplatParams, camera: Camera, background="predicted", *,
           workers: int | None = None) -> RenderOutput:
    """Tiled render over a predicted background or a solid colour."""
    if isinstance(splats, SplatParams):
        splats = splats.activate()
    resolve_background(splats, camera, background)  # fail before doing work
    return rasterize(splats, camera, workers=workers).composite(background)


def render_brute_force(splats: SplatSet | SplatParams, camera: Camera, background="predicted") -> RenderOutput:
    """Reference renderer: every retained splat is evaluated at every pixel.

    No tiling and no bounding boxes; splats are visited in the global
    (depth, index) order and blended one at a time.
    """
    if isinstance(splats, SplatParams):
        splats = splats.activate()
    bg = resolve_background(splats, camera, background)
    proj = project(splats, camera)
    H, W = camera.height, camera.width
    pix = camera.pixel_grid()
    T = np.ones(H * W)
    color = np.zeros((H * W, 3))
    wsum = np.zeros(H * W)
    dsum = np.zeros(H * W)
    means, conics, opac, colors, depths = _kernel_inputs(proj)
    for j in proj.sort_order():
        dx = pix[:, 0] - means[j, 0]
        dy = pix[:, 1] - means[j, 1]
        m = conics[j, 0] * dx * dx + 2.0 * conics[j, 1] * dx * dy + conics[j, 2] * dy * dy
        a = np.where(m > CUTOFF, 0.0, np.minimum(opac[j] * np.exp(-0.5 * m), ALPHA_MAX))
        w = a * T
        color += w[:, None] * colors[j]
        dsum += w * depths[j]
        wsum += w
        T = T * (1.0 - a)
    alpha = 1.0 - T
    out = color.reshape(H, W, 3) + bg * T.reshape(H, W, 1)
    depth = dsum / np.maximum(alpha, DEPTH_EPS)
    dt = splats.dtype
    return RenderOutput(out.astype(dt), alpha.reshape(H, W).astype(dt), depth.reshape(H, W).astype(dt),
                        T.reshape(H, W).astype(dt), wsum.reshape(H, W).astype(dt))


def fragment_state(splats: SplatSet, camera: Camera):
    """Discrete rasteriser state: culling, order, truncation and clamping masks.

    Gradients are piecewise smooth; finite differences are only meaningful
    where this state is unchanged.
    """
    proj = project(splats, camera)
    pix = camera.pixel_grid()
    means, conics, opac, _, _ = _kernel_inputs(proj)
    dx = pix[None, :, 0] - means[:, None, 0]
    dy = pix[None, :, 1] - means[:, None, 1]
    m = conics[:, None, 0] * dx * dx + 2.0 * conics[:, None, 1] * dx * dy + conics[:, None, 2] * dy * dy
    trunc = m > CUTOFF
    clamp = ~trunc & (opac[:, None] * np.exp(-0.5 * m) > ALPHA_MAX)
    return proj.index[proj.sort_order()], trunc, clamp

