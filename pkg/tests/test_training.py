import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from splatkit.animation import AudioFeatureSequence
from splatkit.autodiff import render_backward
from splatkit.core import DivergenceError, ShapeError, lift_grid, lift_grid_backward, lift_grid_params
from splatkit.rasterizer import fragment_state, rasterize
from splatkit.synthetic import base_orbit, face_grid, motion_clip
from splatkit.training import (AdamWState, FitConfig, LossWeights, TrainingClip, adamw_step, dynamic_loss, fit_dynamic,
                               fit_static, format_config, parse_config, psnr, render_clip, ssim, static_loss, to_gray)
from splatkit.training.fit import init_grid


class QuadPerceptual:
    """A stand-in perceptual metric: sum of squared differences of channel means."""

    def __call__(self, a, b):
        return float(np.sum((a.mean(axis=(0, 1)) - b.mean(axis=(0, 1))) ** 2))

    def grad(self, a, b):
        hw = b.shape[0] * b.shape[1]
        return np.broadcast_to(2 * (b.mean(axis=(0, 1)) - a.mean(axis=(0, 1))) / hw, b.shape).copy()


def imgs(rng, n=4, shape=(6, 5, 3)):
    return [rng.uniform(size=shape) for _ in range(n)]


# ---------------------------------------------------------------- losses


@pytest.mark.parametrize("loss", [static_loss, dynamic_loss])
def test_loss_perfect_reconstruction(loss, rng):
    a, b, _, _ = imgs(rng)
    res = loss(a, a, b, b)
    assert res.value == 0.0
    assert not np.any(res.grad_source) and not np.any(res.grad_future)


@pytest.mark.parametrize("loss", [static_loss, dynamic_loss])
def test_loss_constant_offset_is_delta_squared(loss, rng):
    a, b, _, _ = imgs(rng)
    d = 0.125
    assert loss(a, a + d, b, b).value == pytest.approx(d * d, rel=1e-12)
    assert loss(a, a, b, b - d).value == pytest.approx(d * d, rel=1e-12)


@pytest.mark.parametrize("loss", [static_loss, dynamic_loss])
def test_loss_scalar_loop_oracle(loss, rng):
    a, ar, b, br = imgs(rng)
    lam = 0.37
    per = QuadPerceptual()
    res = loss(a, ar, b, br, LossWeights(lpips=lam), per)
    total = 0.0
    for x, y in ((a, ar), (b, br)):
        acc = 0.0
        for v in np.ndindex(x.shape):
            acc += (x[v] - y[v]) ** 2
        total += acc / x.size
    total += lam * (per(a, ar) + per(b, br))
    assert res.value == pytest.approx(total, rel=1e-12)
    # cotangents against central differences
    h = 1e-6
    for idx in [(0, 0, 0), (3, 2, 1), (5, 4, 2)]:
        e = np.zeros_like(ar)
        e[idx] = h
        fd = (loss(a, ar + e, b, br, LossWeights(lam), per).value
              - loss(a, ar - e, b, br, LossWeights(lam), per).value) / (2 * h)
        assert res.grad_source[idx] == pytest.approx(fd, rel=1e-6, abs=1e-12)


@given(st.integers(0, 10_000))
def test_loss_non_negative_zero_iff_equal(seed):
    r = np.random.default_rng(seed)
    a, ar, b, br = imgs(r)
    assert static_loss(a, ar, b, br).value > 0
    assert static_loss(a, a.copy(), b, b.copy()).value == 0


def test_loss_shape_mismatch(rng):
    a = rng.uniform(size=(4, 4, 3))
    with pytest.raises(ShapeError):
        static_loss(a, a[:3], a, a)


def test_loss_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lpips=-1.0)


# ---------------------------------------------------------------- AdamW


def test_adamw_zero_grad_no_decay():
    p = {"x": np.array([1.0, -2.0])}
    out, st_ = adamw_step(p, {"x": np.zeros(2)}, AdamWState(lr=0.1, weight_decay=0.0))
    np.testing.assert_array_equal(out["x"], p["x"])
    assert st_.step == 1


def test_adamw_first_step():
    out, _ = adamw_step({"t": np.array(0.0)}, {"t": np.array(1.0)}, AdamWState(lr=0.1, weight_decay=0.0))
    assert float(out["t"]) == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-15)


def reference_adamw(theta, grad_fn, steps, lr, b1, b2, eps, wd):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1**t)
        vh = v / (1 - b2**t)
        theta = theta - lr * (mh / (math.sqrt(vh) + eps) + wd * theta)
        out.append(theta)
    return out


def test_adamw_three_step_reference():
    grad_fn = lambda th: 2 * 1.5 * (th - 0.7)  # noqa: E731  d/dθ of 1.5 (θ - 0.7)²
    ref = reference_adamw(2.0, grad_fn, 3, 0.05, 0.9, 0.999, 1e-8, 0.01)
    stt = AdamWState(lr=0.05, weight_decay=0.01)
    p = {"t": np.array(2.0)}
    for want in ref:
        p, stt = adamw_step(p, {"t": grad_fn(p["t"])}, stt)
        assert abs(float(p["t"]) - want) <= 1e-12


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adamw_lr_zero_is_identity(xs):
    p = {"x": np.array(xs)}
    g = {"x": np.array(xs) * 3 + 1}
    out, _ = adamw_step(p, g, AdamWState(lr=0.0))
    assert out["x"].tobytes() == p["x"].tobytes()


def test_adamw_rejects_bad_gradients():
    p = {"x": np.zeros(2)}
    with pytest.raises(DivergenceError):
        adamw_step(p, {"x": np.array([1.0, np.nan])}, AdamWState())
    with pytest.raises(ValueError):
        adamw_step(p, {"x": np.zeros(3)}, AdamWState())


def test_adamw_does_not_mutate_inputs():
    p = {"x": np.ones(3)}
    s0 = AdamWState(lr=0.1)
    adamw_step(p, {"x": np.ones(3)}, s0)
    assert s0.step == 0 and not s0.m
    np.testing.assert_array_equal(p["x"], 1.0)


def test_adamw_lr_scale_freezes():
    p = {"a": np.ones(2), "b": np.ones(2)}
    out, _ = adamw_step(p, {"a": np.ones(2), "b": np.ones(2)}, AdamWState(lr=0.1, lr_scale={"b": 0.0}))
    assert np.all(out["a"] < 1) and np.all(out["b"] == 1)


# ---------------------------------------------------------------- metrics


def test_psnr_cases(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == pytest.approx(0.0)
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf
    b = rng.uniform(size=(8, 8, 3))
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ShapeError):
        psnr(a, b[:4])


def ssim_scalar(a, b):
    """Textbook SSIM with explicit loops over 11x11 windows."""
    x = np.arange(11) - 5.0
    g1 = [math.exp(-v * v / (2 * 1.5**2)) for v in x]
    s = sum(g1)
    w = [[gi * gj / (s * s) for gj in g1] for gi in g1]
    c1, c2 = 0.01**2, 0.03**2
    H, W = a.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            ma = mb = 0.0
            for u in range(11):
                for v in range(11):
                    ma += w[u][v] * a[i + u, j + v]
                    mb += w[u][v] * b[i + u, j + v]
            va = vb = cab = 0.0
            for u in range(11):
                for v in range(11):
                    da, db = a[i + u, j + v] - ma, b[i + u, j + v] - mb
                    va += w[u][v] * da * da
                    vb += w[u][v] * db * db
                    cab += w[u][v] * da * db
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return sum(vals) / len(vals)


def test_ssim_identical_and_constant(rng):
    a = rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c = np.full((12, 14), 0.4)
    assert ssim(c, c) == pytest.approx(1.0, abs=1e-12)
    assert ssim(np.zeros((12, 12)), np.zeros((12, 12))) == 1.0


def test_ssim_checkerboard_negative_oracle():
    v, u = np.mgrid[0:16, 0:16]
    a = ((u + v) % 2).astype(float)
    got = ssim(a, 1 - a)
    assert got < -0.5
    assert got == pytest.approx(ssim_scalar(a, 1 - a), abs=1e-10)


def test_ssim_random_oracle_and_symmetry(rng):
    a, b = rng.uniform(size=(2, 14, 13, 3))
    ga, gb = to_gray(a), to_gray(b)
    assert ssim(a, b) == pytest.approx(ssim_scalar(ga, gb), abs=1e-10)
    assert ssim(a, b) == ssim(b, a)


def test_ssim_too_small():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_luma_weights():
    np.testing.assert_allclose(to_gray(np.array([[[1.0, 0, 0], [0, 1, 0], [0, 0, 1]]])), [[0.299, 0.587, 0.114]])


# ---------------------------------------------------------------- config


def test_config_parse_and_format_round_trip():
    text = """
    # a comment
    iterations = 12
    lr = 0.01   # trailing comment
    random_background = false
    sds_fraction = 0.5, 0.9
    time_embedding = fourier
    """
    cfg = parse_config(text)
    assert (cfg.iterations, cfg.lr, cfg.random_background, cfg.sds_fraction) == (12, 0.01, False, (0.5, 0.9))
    assert cfg.time_embedding == "fourier"
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("bad", ["nokey", "bogus = 1", "iterations = many", "sds = maybe"])
def test_config_errors(bad):
    with pytest.raises(ValueError):
        parse_config(bad)


# ---------------------------------------------------------------- fitting


@pytest.fixture(scope="module")
def small_clip():
    grid, cam = face_grid(12)
    cams = base_orbit(cam, 3)
    s = lift_grid(grid, cam)
    frames = np.stack([rasterize(s, c).composite("predicted").color for c in cams])
    return TrainingClip(frames, cams), grid


def test_clip_validation(small_clip):
    clip, _ = small_clip
    with pytest.raises(ShapeError):
        TrainingClip(clip.frames, clip.cameras[:2])
    with pytest.raises(ShapeError):
        TrainingClip(clip.frames[:, :8], clip.cameras)


def test_zero_iterations_returns_init(small_clip):
    clip, grid = small_clip
    res = fit_static(clip, FitConfig(iterations=0), init=grid)
    assert res.grid is grid and res.history == []
    res = fit_static(clip, FitConfig(iterations=0))
    ref = init_grid(clip.frames[0], clip.cameras[0], FitConfig(), np.random.default_rng(0))
    for k in grid.FIELDS:
        np.testing.assert_array_equal(getattr(res.grid, k), getattr(ref, k))


def test_init_from_frame(small_clip):
    clip, _ = small_clip
    cfg = FitConfig()
    g = init_grid(clip.frames[0], clip.cameras[0], cfg, np.random.default_rng(0))
    np.testing.assert_allclose(1 / (1 + np.exp(-g.color_raw)), np.clip(clip.frames[0], 0.02, 0.98), rtol=1e-12)
    assert not np.any(g.offset)
    assert abs(np.mean(g.depth()) - cfg.depth_prior) < 0.01


def test_static_loss_monotone_single_frame(small_clip):
    clip, _ = small_clip
    one = TrainingClip(np.stack([clip.frames[0]] * 2), [clip.cameras[0]] * 2)
    cfg = FitConfig(iterations=100, lr=1e-3, lpips_weight=0.0, random_background=False)
    losses = [r["loss"] for r in fit_static(one, cfg).history]
    assert all(b <= a + 1e-15 for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


def test_loss_increases_only_at_depth_order_changes(small_clip):
    # The sorted compositor is smooth between changes of front-to-back order;
    # plain gradient descent can only go uphill across such a change.
    clip, _ = small_clip
    cam, target = clip.cameras[0], clip.frames[0]
    g = init_grid(target, cam, FitConfig(), np.random.default_rng(0))

    def loss_grad(grid):
        p = lift_grid_params(grid, cam)
        d = rasterize(p, cam).composite("predicted").color - target
        gb = render_backward(p, cam, "predicted", 4 * d / d.size)
        return 2 * np.mean(d**2), lift_grid_backward(grid, cam, gb)

    prev_loss, prev_order = None, None
    for _ in range(60):
        loss, grads = loss_grad(g)
        order = fragment_state(lift_grid(g, cam), cam)[0]
        if prev_loss is not None and loss > prev_loss:
            assert not np.array_equal(order, prev_order)
        prev_loss, prev_order = loss, order
        g = g.replace(**{k: getattr(g, k) - 0.1 * v for k, v in grads.items()})


def test_static_fit_seed_deterministic(small_clip):
    clip, _ = small_clip
    cfg = FitConfig(iterations=15, lr=1e-2, seed=4)
    a, b = fit_static(clip, cfg), fit_static(clip, cfg)
    for k in a.grid.FIELDS:
        assert getattr(a.grid, k).tobytes() == getattr(b.grid, k).tobytes()
    assert [r["frame"] for r in a.history] == [r["frame"] for r in b.history]


def test_static_fit_with_sds_runs(small_clip):
    from splatkit.diffusion import LinearGaussianDenoiser

    clip, _ = small_clip
    cfg = FitConfig(iterations=3, lr=1e-2, sds=True, sds_steps=6)
    res = fit_static(clip, cfg, denoiser=LinearGaussianDenoiser(0.5, 0.5))
    assert all(r["sds"] > 0 for r in res.history)
    with pytest.raises(ValueError):
        fit_static(clip, cfg)


def test_static_fit_needs_two_frames(small_clip):
    clip, _ = small_clip
    with pytest.raises(ValueError):
        fit_static(TrainingClip(clip.frames[:1], clip.cameras[:1]), FitConfig(iterations=1))


def test_divergence_is_reported(small_clip):
    clip, _ = small_clip
    bad = clip.frames.copy()
    bad[1, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError):
        fit_static(TrainingClip(bad, clip.cameras), FitConfig(iterations=5, lr=1e-2))


@pytest.fixture(scope="module")
def motion():
    frames, cams, feats, grid, offs = motion_clip(size=12, n_frames=5)
    return TrainingClip(frames, cams, AudioFeatureSequence(feats, 25.0)), grid


def test_dynamic_zero_length_matches_static(motion):
    clip, grid = motion
    res = fit_dynamic(clip, grid, FitConfig(dynamic_iterations=0))
    a = render_clip(res.grid, clip, res)
    b = render_clip(grid, clip)
    assert a.tobytes() == b.tobytes()


def test_dynamic_first_iteration_source_render_isolated(motion):
    clip, grid = motion
    seen = []
    res = fit_dynamic(clip, grid, FitConfig(dynamic_iterations=1, random_background=False), callback=seen.append)
    static_src = render_clip(grid, clip)[0]
    assert seen[0]["psnr_source"] == psnr(clip.frames[0], static_src)
    assert np.all(np.isfinite(res.latents))


def test_dynamic_offsets_finite_and_small(motion):
    clip, grid = motion
    res = fit_dynamic(clip, grid, FitConfig(dynamic_iterations=40, random_background=False))
    assert all(np.isfinite(r["max_offset"]) and r["max_offset"] < 0.5 for r in res.history)


def test_dynamic_requires_audio(motion):
    clip, grid = motion
    with pytest.raises(ValueError):
        fit_dynamic(TrainingClip(clip.frames, clip.cameras), grid, FitConfig(dynamic_iterations=1))


def test_dynamic_freeze_keeps_static(motion):
    clip, grid = motion
    res = fit_dynamic(clip, grid, FitConfig(dynamic_iterations=5, freeze_static=True))
    for k in grid.FIELDS:
        assert getattr(res.grid, k).tobytes() == getattr(grid, k).tobytes()
