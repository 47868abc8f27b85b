"""Differentiable Gaussian splat rendering, audio-driven offsets and score distillation."""
import os

# the TBB layer shipped with some numba wheels is too old; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .core import (BoundsError, Camera, DivergenceError, PixelSplatGrid, ShapeError, SplatParams,  # noqa: E402
                   SplatSet, ValidationError, covariance, lift_grid, lift_grid_params, ray_direction)
from .rasterizer import Raster, RenderOutput, project, rasterize, render, render_brute_force  # noqa: E402
from .autodiff import GradBuffer, finite_diff_check, render_backward  # noqa: E402

__all__ = [
    "BoundsError", "Camera", "DivergenceError", "PixelSplatGrid", "ShapeError", "SplatParams", "SplatSet",
    "ValidationError", "covariance", "lift_grid", "lift_grid_params", "ray_direction",
    "Raster", "RenderOutput", "project", "rasterize", "render", "render_brute_force",
    "GradBuffer", "finite_diff_check", "render_backward",
]
