"""Two-stage per-scene fitting: static pre-fit, then audio-conditioned offsets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import animation as anim
from ..autodiff import GradBuffer, composite_backward, rasterize_backward
from ..core import (Camera, DivergenceError, PixelSplatGrid, ShapeError, SplatParams, inverse_softplus,
                    lift_grid_backward, lift_grid_params, logit)
from ..diffusion import IdentityAlign, PoseRange, make_schedule, sample_extreme_pose, sds_loss
from ..rasterizer import rasterize
from .config import FitConfig
from .losses import LossWeights, dynamic_loss, static_loss
from .metrics import mse, psnr
from .optim import AdamWState, adamw_step



@dataclass(frozen=True)
class TrainingClip:
    frames: np.ndarray  # (F, H, W, 3)
    cameras: list
    audio: anim.AudioFeatureSequence | None = None
    fps: float = 25.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 4 or frames.shape[3] != 3:
            raise ShapeError(f"frames must be (F, H, W, 3), got {frames.shape}")
        if len(self.cameras) != len(frames):
            raise ShapeError(f"{len(frames)} frames but {len(self.cameras)} cameras")
        for cam in self.cameras:
            if (cam.height, cam.width) != frames.shape[1:3]:
                raise ShapeError("camera resolution does not match frames")
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)


@dataclass
class StaticFit:
    grid: PixelSplatGrid
    history: list = field(default_factory=list)


@dataclass
class DynamicFit:
    grid: PixelSplatGrid
    head: anim.OffsetHead
    latents: np.ndarray
    encoder: anim.AudioEncoder
    conditions: np.ndarray  # one condition vector per clip frame
    history: list = field(default_factory=list)


def init_grid(frame0, camera: Camera, config: FitConfig, rng) -> PixelSplatGrid:
    """Source-frame initialisation: colours from pixels, constant depth prior, zero offsets."""
    H, W = frame0.shape[:2]
    depth = config.depth_prior + config.depth_jitter * rng.standard_normal((H, W))
    scale = np.log(config.init_scale * config.depth_prior / camera.fx)
    q = np.zeros((H, W, 4))
    q[..., 0] = 1.0
    return PixelSplatGrid(
        opacity_raw=np.full((H, W), float(logit(config.init_opacity))),
        scale_raw=np.full((H, W, 3), scale),
        depth_raw=inverse_softplus(np.maximum(depth, 1e-3)),
        offset=np.zeros((H, W, 3)),
        rotation_raw=q,
        color_raw=logit(np.clip(frame0, 0.02, 0.98)),
        background=np.full((H, W, 3), 0.5),
    )


def _future_index(rng, n_frames):
    return int(rng.integers(1, n_frames)) if n_frames > 1 else 0


class _Step:
    """Accumulates image losses for one optimisation step over a fixed parameter set."""

    def __init__(self, params: SplatParams):
        self.params = params
        self.splats = params.activate()
        self.grad = GradBuffer.zeros_like(params)

    def add(self, raster, cotangents):
        """``cotangents``: list of (background, d_image) for renders of ``raster``."""
        d_color = np.zeros_like(raster.color)
        d_trans = np.zeros_like(raster.transmittance)
        d_bg = None
        for bg, d_img in cotangents:
            dc, dt, db = composite_backward(raster, bg, d_img)
            d_color += dc
            d_trans += dt
            if db is not None:
                d_bg = db if d_bg is None else d_bg + db
        g = rasterize_backward(raster, self.params, d_color, d_trans)
        if d_bg is not None:
            g = GradBuffer(g.positions, g.rotations, g.scales, g.opacities, g.colors, d_bg)
        self.grad = self.grad + g


def _check_finite(value, where):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss during {where}")


def _reconstruction(step: _Step, frames, cams, source_idx, future_idx, splats_future, rng, config, weights,
                    perceptual, loss_fn):
    """Render source and future poses for predicted (and optionally random) backgrounds.

    Returns the summed loss, rasters and per-iteration diagnostics. Cotangents
    are accumulated into ``step``; the future raster is rendered from
    ``splats_future`` so the caller can route its position gradients.
    """
    src_r = rasterize(step.splats, cams[source_idx])
    fut_r = rasterize(splats_future, cams[future_idx])
    backgrounds = ["predicted"]
    if config.random_background:
        backgrounds.append(rng.uniform(0.0, 1.0, size=3))
    total = 0.0
    src_cots, fut_cots = [], []
    pred = None
    for bg in backgrounds:
        src_img = src_r.composite(bg).color
        fut_img = fut_r.composite(bg).color
        res = loss_fn(frames[source_idx], src_img, frames[future_idx], fut_img, weights, perceptual)
        total += res.value
        src_cots.append((bg, res.grad_source))
        fut_cots.append((bg, res.grad_future))
        if pred is None:
            pred = (src_img, fut_img, res)
    return total, src_r, fut_r, src_cots, fut_cots, pred


def _sds_term(step: _Step, camera: Camera, pivot, schedule, denoiser, align, rng, config):
    cam, yaw, pitch = sample_extreme_pose(PoseRange(config.max_yaw, config.max_pitch), camera, rng, pivot)
    raster = rasterize(step.splats, cam)
    x_clean = align(raster.composite("predicted").color)
    res = sds_loss(x_clean, schedule, denoiser, rng, fraction_range=config.sds_fraction, mode=config.sds_mode)
    step.add(raster, [("predicted", config.sds_weight * align.adjoint(res.grad))])
    return config.sds_weight * res.loss


def _adam_state(config: FitConfig, lr):
    return AdamWState(lr=lr, betas=(config.beta1, config.beta2), eps=config.eps, weight_decay=config.weight_decay)


def fit_static(clip: TrainingClip, config: FitConfig = FitConfig(), *, init: PixelSplatGrid | None = None,
               denoiser=None, perceptual=None, align=None, callback=None) -> StaticFit:
    """Optimise a pixel-aligned grid directly against the clip frames.

    Each iteration pairs the source frame (0) with a random future frame,
    renders both over the predicted background and, when enabled, over a
    random solid colour, and optionally adds score distillation at a random
    extreme pose.
    """
    if len(clip) < 2:
        raise ValueError("static fitting needs at least two frames")
    rng = np.random.default_rng(config.seed)
    cam0 = clip.cameras[0]
    grid = init if init is not None else init_grid(clip.frames[0], cam0, config, rng)
    if config.iterations == 0:
        return StaticFit(grid, [])
    weights = LossWeights(config.lpips_weight, config.sds_weight)
    schedule = make_schedule(config.sigma_min, config.sigma_max, config.rho, config.sds_steps)
    if config.sds and denoiser is None:
        raise ValueError("score distillation enabled but no denoiser given")
    align = align or IdentityAlign()
    state = _adam_state(config, config.lr)
    history = []
    for it in range(config.iterations):
        n = _future_index(rng, len(clip))
        params = lift_grid_params(grid, cam0)
        step = _Step(params)
        total, src_r, fut_r, src_cots, fut_cots, pred = _reconstruction(
            step, clip.frames, clip.cameras, 0, n, step.splats, rng, config, weights, perceptual, static_loss)
        step.add(src_r, src_cots)
        step.add(fut_r, fut_cots)
        sds_value = 0.0
        if config.sds:
            pivot = step.splats.positions.mean(axis=0)
            sds_value = _sds_term(step, cam0, pivot, schedule, denoiser, align, rng, config)
        total += sds_value
        _check_finite(total, f"static iteration {it}")
        g = lift_grid_backward(grid, cam0, step.grad)
        new, state = adamw_step(grid.as_dict(), g, state)
        new["background"] = np.clip(new["background"], 0.0, 1.0)
        grid = grid.replace(**new)
        src_img, fut_img, res = pred
        row = {"stage": "static", "iteration": it, "frame": n, "loss": total, "sds": sds_value,
               "psnr_source": psnr(clip.frames[0], src_img), "psnr_future": psnr(clip.frames[n], fut_img)}
        history.append(row)
        if callback is not None:
            callback(row)
    return StaticFit(grid, history)


def clip_conditions(clip: TrainingClip, encoder: anim.AudioEncoder, config: FitConfig):
    """Condition vector for every frame, time measured from the source frame."""
    return np.stack([
        anim.condition_vector(clip.audio, k / clip.fps, encoder, window_half=config.window_half,
                              time_embedding=config.time_embedding, time_frequencies=config.time_frequencies)
        for k in range(len(clip))
    ])


def make_encoder(audio: anim.AudioFeatureSequence, config: FitConfig):
    return anim.AudioEncoder.init(audio.features.shape[1], 2 * config.window_half + 1,
                                  embed_dim=config.embed_dim, seed=config.seed + 1)


def fit_dynamic(clip: TrainingClip, grid: PixelSplatGrid, config: FitConfig = FitConfig(), *, encoder=None,
                head=None, latents=None, denoiser=None, perceptual=None, align=None, callback=None) -> DynamicFit:
    """Fine-tune with a zero-initialised offset head driven by audio and time.

    The source frame is rendered with zero offsets, the future frame with the
    predicted ones. Static parameters are fine-tuned at ``static_lr_scale``
    times the head learning rate unless ``freeze_static`` is set.
    """
    if clip.audio is None:
        raise ValueError("dynamic fitting needs audio features")
    rng = np.random.default_rng(config.seed + 2)
    cam0 = clip.cameras[0]
    encoder = encoder or make_encoder(clip.audio, config)
    conditions = clip_conditions(clip, encoder, config)
    positions = lift_grid_params(grid, cam0).positions
    head = head or anim.OffsetHead.init(positions, conditions.shape[1], config.latent_dim, config.hidden,
                                        seed=config.seed + 3)
    if latents is None:
        latents = np.random.default_rng(config.seed + 4).normal(0, 0.1, (len(positions), head.latent_dim))
    weights = LossWeights(config.lpips_weight, config.sds_weight)
    schedule = make_schedule(config.sigma_min, config.sigma_max, config.rho, config.sds_steps)
    if config.sds and denoiser is None:
        raise ValueError("score distillation enabled but no denoiser given")
    align = align or IdentityAlign()
    state = _adam_state(config, config.dynamic_lr)
    static_scale = 0.0 if config.freeze_static else config.static_lr_scale
    state.lr_scale.update({k: static_scale for k in PixelSplatGrid.FIELDS})
    history = []
    for it in range(config.dynamic_iterations):
        n = _future_index(rng, len(clip))
        params = lift_grid_params(grid, cam0)
        step = _Step(params)
        offsets, cache = anim.dynamic_offset_field(step.splats, conditions[n], head, latents, return_cache=True)
        future = anim.apply_dynamic_offsets(step.splats, offsets)
        total, src_r, fut_r, src_cots, fut_cots, pred = _reconstruction(
            step, clip.frames, clip.cameras, 0, n, future, rng, config, weights, perceptual, dynamic_loss)
        step.add(src_r, src_cots)
        before = step.grad.positions.copy()
        step.add(fut_r, fut_cots)
        d_offsets = step.grad.positions - before
        sds_value = 0.0
        if config.sds:
            sds_value = _sds_term(step, cam0, step.splats.positions.mean(axis=0), schedule, denoiser, align, rng,
                                  config)
        total += sds_value
        _check_finite(total, f"dynamic iteration {it}")
        head_grads, d_latents = anim.dynamic_offset_backward(head, cache, d_offsets)
        all_params = {**grid.as_dict(), **{f"head.{k}": v for k, v in head.trainable().items()}, "latents": latents}
        all_grads = {**({} if static_scale == 0 else lift_grid_backward(grid, cam0, step.grad)),
                     **{f"head.{k}": v for k, v in head_grads.items()}, "latents": d_latents}
        new, state = adamw_step(all_params, all_grads, state)
        grid = grid.replace(**{k: new[k] for k in PixelSplatGrid.FIELDS})
        if static_scale:
            grid = grid.replace(background=np.clip(grid.background, 0.0, 1.0))
        head = head.replace(**{k: new[f"head.{k}"] for k in head.TRAINABLE})
        latents = new["latents"]
        src_img, fut_img, res = pred
        row = {"stage": "dynamic", "iteration": it, "frame": n, "loss": total, "sds": sds_value,
               "psnr_source": psnr(clip.frames[0], src_img), "psnr_future": psnr(clip.frames[n], fut_img),
               "max_offset": float(np.max(np.linalg.norm(offsets, axis=1)))}
        history.append(row)
        if callback is not None:
            callback(row)
    return DynamicFit(grid, head, latents, encoder, conditions, history)


def render_clip(grid: PixelSplatGrid, clip: TrainingClip, dynamic: DynamicFit | None = None, background="predicted"):
    """Render every clip frame at its camera, with offsets when ``dynamic`` is given."""
    splats = lift_grid_params(grid, clip.cameras[0]).activate()
    out = []
    for k, cam in enumerate(clip.cameras):
        s = splats
        if dynamic is not None and k > 0:  # the source frame is always rendered with zero offsets
            s = anim.apply_dynamic_offsets(splats, anim.dynamic_offset_field(
                splats, dynamic.conditions[k], dynamic.head, dynamic.latents))
        out.append(rasterize(s, cam).composite(background).color)
    return np.stack(out)


def clip_errors(renders, clip: TrainingClip):
    return np.array([mse(r, f) for r, f in zip(renders, clip.frames)])
