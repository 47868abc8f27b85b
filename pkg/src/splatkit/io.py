"""Binary scene and tensor containers, camera JSON and PNG frames.

All binary data is little-endian. Layouts are documented in FORMATS.md.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np
from PIL import Image

from .core import Camera, SplatSet, ValidationError

SCENE_MAGIC = b"SPLT"
SCENE_VERSION = 1
TENSOR_MAGIC = b"TNSR"
FLAG_BACKGROUND = 1
SPLAT_FLOATS = 14  # position 3, quaternion wxyz 4, scale 3, opacity 1, color 3

_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Malformed or inconsistent file contents."""


# --------------------------------------------------------------------------
# SceneFile


def _open_unit(x):
    """Nudge f32 values into the open interval (0, 1)."""
    tiny = np.nextafter(np.float32(0), np.float32(1))
    return np.clip(x, tiny, np.float32(1) - np.finfo(np.float32).epsneg)


def scene_to_bytes(splats: SplatSet) -> bytes:
    n = len(splats)
    q = np.asarray(splats.rotations, dtype=_F32).copy()
    q[q[:, 0] < 0] *= -1  # wxyz with w >= 0
    table = np.concatenate([
        np.asarray(splats.positions, dtype=_F32),
        q,
        np.asarray(splats.scales, dtype=_F32),
        _open_unit(np.asarray(splats.opacities, dtype=_F32))[:, None],
        np.asarray(splats.colors, dtype=_F32),
    ], axis=1).reshape(n, SPLAT_FLOATS)
    bg = splats.background
    flags = FLAG_BACKGROUND if bg is not None else 0
    parts = [SCENE_MAGIC, struct.pack("<III", SCENE_VERSION, n, flags), table.astype(_F32).tobytes()]
    if bg is not None:
        H, W = bg.shape[:2]
        parts += [struct.pack("<II", W, H), np.asarray(bg, dtype=_F32).tobytes()]
    return b"".join(parts)


def scene_from_bytes(data: bytes) -> SplatSet:
    if len(data) < 16 or data[:4] != SCENE_MAGIC:
        raise FormatError("not a scene file (bad magic)")
    version, n, flags = struct.unpack_from("<III", data, 4)
    if version != SCENE_VERSION:
        raise FormatError(f"unsupported scene version {version}")
    if flags & ~FLAG_BACKGROUND:
        raise FormatError(f"unknown flag bits {flags:#x}")
    off = 16
    end = off + 4 * SPLAT_FLOATS * n
    if len(data) < end:
        raise FormatError("truncated splat table")
    table = np.frombuffer(data, dtype=_F32, count=SPLAT_FLOATS * n, offset=off).reshape(n, SPLAT_FLOATS)
    bg = None
    if flags & FLAG_BACKGROUND:
        if len(data) < end + 8:
            raise FormatError("truncated background header")
        W, H = struct.unpack_from("<II", data, end)
        bg_end = end + 8 + 4 * W * H * 3
        if len(data) != bg_end:
            raise FormatError(f"background size mismatch: expected {bg_end} bytes, got {len(data)}")
        bg = np.frombuffer(data, dtype=_F32, count=W * H * 3, offset=end + 8).reshape(H, W, 3).copy()
    elif len(data) != end:
        raise FormatError(f"expected {end} bytes, got {len(data)}")
    if not np.all(np.isfinite(table)):
        raise FormatError("non-finite splat values")
    table = table.copy()
    q = table[:, 3:7]
    if n and np.any(q[:, 0] < 0):
        raise FormatError("quaternion w must be non-negative")
    try:
        return SplatSet(table[:, 0:3], q, table[:, 7:10], table[:, 10], table[:, 11:14], bg)
    except ValidationError as exc:
        raise FormatError(str(exc)) from None


def write_scene(path, splats: SplatSet):
    with open(path, "wb") as fh:
        fh.write(scene_to_bytes(splats))


def read_scene(path) -> SplatSet:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())


# --------------------------------------------------------------------------
# TensorFile


def tensor_to_bytes(array) -> bytes:
    a = np.asarray(array, dtype=_F32, order="C")
    return TENSOR_MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape) + a.tobytes()


def tensor_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != TENSOR_MAGIC:
        raise FormatError("not a tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", data, 4)
    head = 8 + 4 * rank
    if len(data) < head:
        raise FormatError("truncated tensor header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != head + 4 * count:
        raise FormatError(f"tensor of shape {dims} needs {head + 4 * count} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=_F32, count=count, offset=head).reshape(dims).copy()


def write_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


# --------------------------------------------------------------------------
# CameraFile


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
        "width": int(cam.width), "height": int(cam.height),
        "world_from_camera": [float(x) for x in cam.world_from_camera.reshape(-1)],
    }


def camera_from_dict(d: dict) -> Camera:
    try:
        m = d["world_from_camera"]
        if len(m) != 16:
            raise FormatError("world_from_camera needs 16 values")
        return Camera.from_matrix(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                  int(d["width"]), int(d["height"]), np.array(m, dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad camera document: {exc}") from None


def write_camera(path, cam: Camera):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(camera_to_dict(cam), fh, indent=2)
        fh.write("\n")


def read_camera(path) -> Camera:
    with open(path, encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from None
    return camera_from_dict(d)


# --------------------------------------------------------------------------
# images


def to_uint8(image):
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(img).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: {exc}") from None


def list_files(directory, suffix):
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(suffix))
    return [os.path.join(directory, n) for n in names]


# --------------------------------------------------------------------------
# offset-head directory: one TensorFile per array plus meta.json


def write_arrays(directory, prefix, arrays: dict):
    for name in sorted(arrays):
        write_tensor(os.path.join(directory, f"{prefix}.{name}.tnsr"), arrays[name])


def read_arrays(directory, prefix) -> dict:
    out = {}
    for path in list_files(directory, ".tnsr"):
        base = os.path.basename(path)[:-5]
        if base.startswith(prefix + "."):
            out[base[len(prefix) + 1:]] = read_tensor(path).astype(np.float64)
    return out


def write_head(directory, head, encoder, latents, meta: dict):
    os.makedirs(directory, exist_ok=True)
    write_arrays(directory, "head", head.to_arrays())
    write_arrays(directory, "encoder", encoder.to_arrays())
    write_tensor(os.path.join(directory, "latents.tnsr"), latents)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_head(directory):
    """Returns ``(head, encoder, latents, meta)``."""
    from .animation import AudioEncoder, OffsetHead

    meta_path = os.path.join(directory, "meta.json")
    if not os.path.isfile(meta_path):
        raise FileNotFoundError(f"no meta.json in {directory}")
    with open(meta_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    try:
        head = OffsetHead.from_arrays(read_arrays(directory, "head"))
        encoder = AudioEncoder.from_arrays(read_arrays(directory, "encoder"))
    except KeyError as exc:
        raise FormatError(f"head directory is missing {exc}") from None
    latents = read_tensor(os.path.join(directory, "latents.tnsr")).astype(np.float64)
    return head, encoder, latents, meta
