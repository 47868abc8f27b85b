"""Fit configuration and its key-value text format.

One ``key = value`` per line; ``#`` starts a comment. Values are parsed by
the type of the matching field: numbers, ``true``/``false``, strings, or
comma-separated number pairs such as ``sds_fraction = 0.6, 0.8``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields


@dataclass(frozen=True)
class FitConfig:
    # optimisation
    iterations: int = 2000
    lr: float = 2.5e-5
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # static losses
    lpips_weight: float = 0.01
    random_background: bool = True
    # initialisation from the source frame
    depth_prior: float = 1.0
    depth_jitter: float = 0.01
    init_opacity: float = 0.9
    init_scale: float = 0.7  # fraction of the pixel footprint at the prior depth
    # score distillation
    sds: bool = False
    sds_weight: float = 1.0
    sds_fraction: tuple = (0.6, 0.8)
    sds_mode: str = "index"
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sds_steps: int = 18
    max_yaw: float = 45.0
    max_pitch: float = 12.5
    # dynamic stage
    dynamic_iterations: int = 1000
    dynamic_lr: float = 1e-3
    static_lr_scale: float = 0.1
    freeze_static: bool = False
    window_half: int = 8
    time_embedding: str = "positional"
    time_frequencies: int = 6
    latent_dim: int = 8
    hidden: int = 32
    embed_dim: int = 16
    fps: float = 25.0

    def replace(self, **kw):
        return FitConfig(**{**asdict(self), **kw})


def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(p) for p in raw.split(","))
    return raw.strip("\"'")


def parse_config(text: str, base: FitConfig | None = None) -> FitConfig:
    base = base or FitConfig()
    known = {f.name for f in fields(FitConfig)}
    values = asdict(base)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, values[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    return FitConfig(**values)


def load_config(path) -> FitConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def format_config(cfg: FitConfig) -> str:
    out = []
    for k, v in asdict(cfg).items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
