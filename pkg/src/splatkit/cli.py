"""Command-line entry points.

Exit codes: 0 success, 1 validation or acceptance failure, 2 I/O or parse error.
"""
from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import animation as anim
from .autodiff import finite_diff_check, linear_loss
from .core import DivergenceError, lift_grid_params
from .diffusion import make_schedule, orbit_camera
from .io import (FormatError, camera_to_dict, list_files, read_camera, read_head, read_png, read_scene, read_tensor,
                 write_camera, write_head, write_png, write_scene, write_tensor)
from .rasterizer import render, render_brute_force
from .synthetic import default_camera, random_params
from .training import (FitConfig, TrainingClip, fit_dynamic, fit_static, load_config, psnr, render_clip, ssim)

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    """Bad argument value; reported with exit code 2."""


def _floats(text, n=None, what="value"):
    try:
        vals = [float(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"cannot parse {what} {text!r}") from None
    if n is not None and len(vals) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return vals


def parse_background(text):
    if text == "predicted":
        return "predicted"
    if text.startswith("solid:"):
        return np.array(_floats(text[len("solid:"):], 3, "solid colour"))
    raise UsageError(f"background must be 'predicted' or 'solid:R,G,B', got {text!r}")


def parse_size(text):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"size must look like HxW, got {text!r}") from None
    return h, w


def parse_range(text):
    """``A`` means the symmetric sweep [-A, A]; ``LO,HI`` is explicit."""
    vals = _floats(text, what="range")
    if len(vals) == 1:
        return -abs(vals[0]), abs(vals[0])
    if len(vals) == 2:
        return vals[0], vals[1]
    raise UsageError(f"range must be A or LO,HI, got {text!r}")


def _fmt(x):
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _stem(path):
    root, _ = os.path.splitext(path)
    return root


# --------------------------------------------------------------------------
# commands


def cmd_render(args):
    splats = read_scene(args.scene)
    cam = read_camera(args.camera)
    bg = parse_background(args.background)
    out = render_brute_force(splats, cam, bg) if args.oracle else render(splats, cam, bg)
    write_png(args.out, out.color)
    if args.depth_out:
        write_depth(args.depth_out, out)
    return EXIT_OK


def write_depth(path, out):
    """8-bit preview normalised over covered pixels, a range sidecar and the full-precision tensor."""
    depth = np.asarray(out.depth, dtype=np.float64)
    covered = np.asarray(out.alpha) > 1e-6
    lo, hi = (float(depth[covered].min()), float(depth[covered].max())) if covered.any() else (0.0, 0.0)
    span = hi - lo if hi > lo else 1.0
    preview = np.where(covered, (depth - lo) / span, 0.0)
    write_png(path, np.repeat(preview[..., None], 3, axis=2))
    with open(_stem(path) + ".range.txt", "w", encoding="utf-8") as fh:
        fh.write(f"min {lo!r}\nmax {hi!r}\n")
    write_tensor(_stem(path) + ".tnsr", depth)


def turntable_angles(k, yaw_range, pitch_range):
    if k == 1:
        return [0.5 * sum(yaw_range)], [0.5 * sum(pitch_range)]
    return list(np.linspace(*yaw_range, k)), list(np.linspace(*pitch_range, k))


def cmd_turntable(args):
    splats = read_scene(args.scene)
    base = read_camera(args.camera)
    if args.frames < 1:
        raise UsageError("--frames must be at least 1")
    pivot = _floats(args.pivot, 3, "pivot") if args.pivot else (
        splats.positions.astype(np.float64).mean(axis=0) if len(splats) else base.translation + base.rotation[:, 2])
    bg = parse_background(args.background)
    yaws, pitches = turntable_angles(args.frames, parse_range(args.yaw_range), parse_range(args.pitch_range))
    os.makedirs(args.out, exist_ok=True)
    width = max(4, len(str(args.frames - 1)))
    for k, (yaw, pitch) in enumerate(zip(yaws, pitches)):
        cam = orbit_camera(base, pivot, yaw, pitch)
        name = os.path.join(args.out, f"frame_{k:0{width}d}")
        write_png(name + ".png", render(splats, cam, bg).color)
        write_camera(name + ".json", cam)
    return EXIT_OK


def _load_clip(args, fps, audio):
    frame_paths = list_files(args.frames, ".png")
    cam_paths = list_files(args.cameras, ".json")
    if len(frame_paths) < 2:
        raise UsageError(f"need at least two PNG frames in {args.frames}")
    if len(frame_paths) != len(cam_paths):
        raise UsageError(f"{len(frame_paths)} frames but {len(cam_paths)} camera files")
    frames = np.stack([read_png(p) for p in frame_paths])
    cams = [read_camera(p) for p in cam_paths]
    return TrainingClip(frames, cams, audio, fps)


HISTORY_FIELDS = ("stage", "iteration", "frame", "loss", "sds", "psnr_source", "psnr_future", "max_offset")


def write_history(path, rows, final_psnr):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in rows:
            w.writerow([r.get(k, "") if k in ("stage", "iteration", "frame") else
                        (_fmt(r[k]) if k in r else "") for k in HISTORY_FIELDS])
        w.writerow(["final", "", "", "", "", _fmt(final_psnr), "", ""])


def cmd_fit(args):
    try:
        cfg = load_config(args.config) if args.config else FitConfig()
    except ValueError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    overrides = {}
    if args.iters is not None:
        overrides["iterations"] = args.iters
    if args.dynamic_iters is not None:
        overrides["dynamic_iterations"] = args.dynamic_iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.replace(**overrides)
    audio = None
    if args.audio:
        feats = read_tensor(args.audio).astype(np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        audio = anim.AudioFeatureSequence(feats, args.audio_rate)
    clip = _load_clip(args, cfg.fps, audio)
    static = fit_static(clip, cfg)
    grid, history, dynamic = static.grid, list(static.history), None
    if audio is not None:
        dynamic = fit_dynamic(clip, grid, cfg)
        grid = dynamic.grid
        history += dynamic.history
    renders = render_clip(grid, clip, dynamic)
    final = float(np.mean([psnr(f, r) for f, r in zip(clip.frames, renders)]))
    write_scene(args.out, lift_grid_params(grid, clip.cameras[0]).activate())
    write_history(args.history or _stem(args.out) + ".history.csv", history, final)
    if dynamic is not None:
        meta = {"window_half": cfg.window_half, "time_embedding": cfg.time_embedding,
                "time_frequencies": cfg.time_frequencies, "audio_rate": args.audio_rate, "fps": cfg.fps,
                "source_camera": camera_to_dict(clip.cameras[0])}
        write_head(args.head or _stem(args.out) + ".head", dynamic.head, dynamic.encoder, dynamic.latents, meta)
    print(f"final PSNR {_fmt(final)} dB")
    return EXIT_OK


def animate_frames(splats, head, encoder, latents, audio, cam, fps, *, window_half, time_embedding,
                   time_frequencies, background="predicted"):
    """Render one image per output frame, with offsets at ``t = k / fps``."""
    n = max(1, int(round(audio.duration * fps)))
    s64 = splats.astype(np.float64)
    for k in range(n):
        cond = anim.condition_vector(audio, k / fps, encoder, window_half=window_half,
                                     time_embedding=time_embedding, time_frequencies=time_frequencies)
        offsets = anim.dynamic_offset_field(s64, cond, head, latents)
        yield render(anim.apply_dynamic_offsets(splats, offsets), cam, background).color


def cmd_animate(args):
    splats = read_scene(args.scene)
    if not os.path.isdir(args.head):
        raise FileNotFoundError(f"head weights directory {args.head} not found")
    head, encoder, latents, meta = read_head(args.head)
    cam = read_camera(args.camera)
    feats = read_tensor(args.audio).astype(np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    rate = args.audio_rate if args.audio_rate is not None else meta.get("audio_rate", 25.0)
    audio = anim.AudioFeatureSequence(feats, rate)
    os.makedirs(args.out, exist_ok=True)
    frames = animate_frames(splats, head, encoder, latents, audio, cam, args.fps,
                            window_half=int(meta["window_half"]), time_embedding=meta["time_embedding"],
                            time_frequencies=int(meta["time_frequencies"]),
                            background=parse_background(args.background))
    for k, img in enumerate(frames):
        write_png(os.path.join(args.out, f"frame_{k:04d}.png"), img)
    return EXIT_OK


def cmd_gradcheck(args):
    h, w = parse_size(args.size)
    dtype = {"f64": np.float64, "f32": np.float32}.get(args.precision)
    if dtype is None:
        raise UsageError(f"precision must be f32 or f64, got {args.precision!r}")
    rng = np.random.default_rng(args.seed)
    cam = default_camera(w, h)
    params = random_params(args.splats, cam, rng, dtype=dtype)
    cot = rng.normal(size=(h, w, 3))
    # a 1e-5 step is below single-precision noise; ~cbrt(eps) balances truncation and rounding
    h_rel = 1e-5 if dtype is np.float64 else 3e-3
    report = finite_diff_check(params, cam, linear_loss(cot), tolerance=args.tol, h_rel=h_rel)
    print(report.table())
    ok = report.passed
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INVALID


def _image_list(path):
    return list_files(path, ".png") if os.path.isdir(path) else [path]


def cmd_eval(args):
    a, b = _image_list(args.a), _image_list(args.b)
    if len(a) != len(b) or not a:
        raise ValueError(f"{len(a)} images vs {len(b)} images")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["frame", "psnr", "ssim"])
    ps, ss = [], []
    for pa, pb in zip(a, b):
        ia, ib = read_png(pa), read_png(pb)
        ps.append(psnr(ia, ib))
        ss.append(ssim(ia, ib))
        w.writerow([os.path.basename(pa), _fmt(ps[-1]), _fmt(ss[-1])])
    w.writerow(["mean", _fmt(np.mean(ps)), _fmt(np.mean(ss))])
    return EXIT_OK


def cmd_schedule(args):
    sched = make_schedule(args.sigma_min, args.sigma_max, args.rho, args.steps)
    print("index,sigma")
    for i, s in enumerate(sched.levels):
        print(f"{i},{float(s)!r}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="splatkit", description="Differentiable splat rendering and fitting.")
    p.add_argument("--workers", type=int, default=None, help="rasterizer threads")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("render", help="render a scene to PNG")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--background", default="predicted")
    r.add_argument("--depth-out")
    r.add_argument("--oracle", action="store_true", help="use the brute-force renderer")
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("turntable", help="render an orbit around the scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--camera", required=True)
    t.add_argument("--frames", type=int, default=9)
    t.add_argument("--yaw-range", default="45")
    t.add_argument("--pitch-range", default="0")
    t.add_argument("--pivot")
    t.add_argument("--background", default="predicted")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_turntable)

    f = sub.add_parser("fit", help="fit a scene to frames (and audio)")
    f.add_argument("--frames", required=True)
    f.add_argument("--cameras", required=True)
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.add_argument("--audio")
    f.add_argument("--audio-rate", type=float, default=25.0)
    f.add_argument("--iters", type=int)
    f.add_argument("--dynamic-iters", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--history")
    f.add_argument("--head")
    f.set_defaults(func=cmd_fit)

    a = sub.add_parser("animate", help="render audio-driven frames")
    a.add_argument("--scene", required=True)
    a.add_argument("--head", required=True)
    a.add_argument("--audio", required=True)
    a.add_argument("--camera", required=True)
    a.add_argument("--fps", type=float, default=25.0)
    a.add_argument("--audio-rate", type=float)
    a.add_argument("--background", default="predicted")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_animate)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splats", type=int, default=16)
    g.add_argument("--size", default="16x16")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--precision", default="f64")
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval", help="PSNR and SSIM between images or directories")
    e.add_argument("--a", required=True)
    e.add_argument("--b", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("schedule", help="print the noise schedule")
    s.add_argument("--sigma-min", type=float, default=0.002)
    s.add_argument("--sigma-max", type=float, default=80.0)
    s.add_argument("--rho", type=float, default=7.0)
    s.add_argument("--steps", type=int, default=18)
    s.set_defaults(func=cmd_schedule)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.workers is not None:
        os.environ["SPLATKIT_WORKERS"] = str(args.workers)
    try:
        return args.func(args)
    except (FormatError, UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, DivergenceError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
