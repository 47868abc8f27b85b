from .config import FitConfig, format_config, load_config, parse_config
from .fit import (DynamicFit, StaticFit, TrainingClip, clip_conditions, clip_errors, fit_dynamic, fit_static,
                  init_grid, make_encoder, render_clip)
from .losses import LossResult, LossWeights, NullPerceptual, PerceptualMetric, dynamic_loss, l2_term, static_loss
from .metrics import mse, psnr, ssim, ssim_map, to_gray
from .optim import AdamWState, adamw_step

__all__ = [
    "FitConfig", "format_config", "load_config", "parse_config",
    "DynamicFit", "StaticFit", "TrainingClip", "clip_conditions", "clip_errors", "fit_dynamic", "fit_static",
    "init_grid", "make_encoder", "render_clip",
    "LossResult", "LossWeights", "NullPerceptual", "PerceptualMetric", "dynamic_loss", "l2_term", "static_loss",
    "mse", "psnr", "ssim", "ssim_map", "to_gray",
    "AdamWState", "adamw_step",
]
