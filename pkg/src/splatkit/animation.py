"""Conditioning for time-varying splats: embeddings, FiLM, audio attention pooling, offset head."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from .core import ShapeError, SplatSet, ValidationError

LEAKY_SLOPE = 0.02
ATT_CHANNELS = (16, 8, 4, 2, 1)


def positional_embedding(x, frequencies: int, include_input: bool = True):
    """``[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(...)]`` per entry."""
    if frequencies < 1:
        raise ValueError("need at least one frequency")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ang = np.pi * x[:, None] * 2.0 ** np.arange(frequencies)
    sc = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(len(x), -1)
    out = np.concatenate([x[:, None], sc], axis=1) if include_input else sc
    return out.reshape(-1)


def fourier_embedding(x, features: int = 8, scale: float = 1.0, seed: int = 0):
    """Random Fourier features ``[sin(2 pi b x), cos(2 pi b x)]`` with seeded b ~ N(0, scale^2)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    b = np.random.default_rng(seed).normal(0.0, scale, size=features)
    ang = 2 * np.pi * x[:, None] * b
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).reshape(-1)


def film(features, gamma, beta):
    features, gamma, beta = (np.asarray(a) for a in (features, gamma, beta))
    if not (features.shape[-1] == gamma.shape[-1] == beta.shape[-1]):
        raise ShapeError("film: features, gamma and beta must share their last dimension")
    return gamma * features + beta


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def audio_attention_pool(window, score_weights=None, *, logits=None):
    """Softmax-weighted sum of ``window`` (K, E) rows.

    Logits come from ``score_weights``: a length-E vector (logit = row . w)
    or a callable mapping the window to K logits. They may also be passed
    directly as ``logits``. Returns ``(pooled, attention_weights)``.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2 or window.shape[0] == 0:
        raise ValueError("attention pooling needs a non-empty (K, E) window")
    if logits is None:
        if callable(score_weights):
            logits = score_weights(window)
        else:
            logits = window @ np.asarray(score_weights, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (window.shape[0],):
        raise ShapeError(f"expected {window.shape[0]} logits, got {logits.shape}")
    w = softmax(logits)
    return w @ window, w


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def conv1d(x, weight, bias):
    """'same' 1-D convolution, kernel 3: x (C_in, K), weight (C_out, C_in, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1)))
    cols = np.stack([xp[:, i:i + x.shape[1]] for i in range(3)], axis=-1)  # (C_in, K, 3)
    return np.einsum("oik,ink->on", weight, cols) + bias[:, None]


@dataclass(frozen=True)
class AudioFeatureSequence:
    features: np.ndarray  # (F, D)
    rate: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValidationError("audio features must be a non-empty (F, D) array")
        if not np.all(np.isfinite(f)):
            raise ValidationError("audio features must be finite")
        if not self.rate > 0:
            raise ValidationError("audio frame rate must be positive")
        object.__setattr__(self, "features", f)

    def __len__(self):
        return self.features.shape[0]

    @property
    def duration(self):
        return len(self) / self.rate


@dataclass(frozen=True)
class AudioEncoder:
    """Per-frame embedding MLP followed by a convolutional attention scorer.

    The scorer stacks 1-D convolutions over the window with channels
    E -> 16 -> 8 -> 4 -> 2 -> 1, LeakyReLU(0.02) in between, then a K x K
    linear layer whose softmax gives the attention weights.
    """

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray
    conv_w: tuple
    conv_b: tuple
    att_w: np.ndarray
    att_b: np.ndarray

    @classmethod
    def init(cls, feature_dim, window, embed_dim=16, hidden=32, seed=0):
        rng = np.random.default_rng(seed)
        lin = lambda o, i: rng.normal(0, 1 / np.sqrt(i), (o, i))  # noqa: E731
        chans = (embed_dim,) + ATT_CHANNELS
        conv_w = tuple(rng.normal(0, 1 / np.sqrt(3 * ci), (co, ci, 3)) for ci, co in zip(chans[:-1], chans[1:]))
        conv_b = tuple(np.zeros(co) for co in chans[1:])
        return cls(lin(hidden, feature_dim), np.zeros(hidden), lin(embed_dim, hidden), np.zeros(embed_dim),
                   conv_w, conv_b, lin(window, window), np.zeros(window))

    @property
    def window(self):
        return self.att_w.shape[0]

    def embed(self, frames):
        h = leaky_relu(frames @ self.w_in.T + self.b_in)
        return h @ self.w_out.T + self.b_out

    def logits(self, emb):
        x = emb.T
        for w, b in zip(self.conv_w, self.conv_b):
            x = leaky_relu(conv1d(x, w, b))
        return self.att_w @ x.reshape(-1) + self.att_b

    def to_arrays(self):
        d = {"w_in": self.w_in, "b_in": self.b_in, "w_out": self.w_out, "b_out": self.b_out,
             "att_w": self.att_w, "att_b": self.att_b}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            d[f"conv{i}_w"], d[f"conv{i}_b"] = w, b
        return d

    @classmethod
    def from_arrays(cls, d):
        n = len(ATT_CHANNELS)
        return cls(d["w_in"], d["b_in"], d["w_out"], d["b_out"],
                   tuple(d[f"conv{i}_w"] for i in range(n)), tuple(d[f"conv{i}_b"] for i in range(n)),
                   d["att_w"], d["att_b"])


def window_indices(n_frames, rate, t, window_half):
    centre = int(np.floor(t * rate + 0.5))
    return np.clip(np.arange(centre - window_half, centre + window_half + 1), 0, n_frames - 1)


def temporal_embedding(t, kind="positional", frequencies=6, seed=0):
    if kind == "positional":
        return positional_embedding([t], frequencies)
    if kind == "fourier":
        return fourier_embedding([t], frequencies, seed=seed)
    if kind == "none":
        return np.zeros(0)
    raise ValueError(f"unknown temporal embedding {kind!r}")


def condition_vector(audio: AudioFeatureSequence, t: float, encoder: AudioEncoder, *, window_half=8,
                     time_embedding="positional", time_frequencies=6):
    """Attention-pooled audio embedding around time ``t`` concatenated with a time embedding."""
    if len(audio) == 0:
        raise ValueError("empty audio")
    if not (np.isfinite(t) and t >= 0):
        raise ValidationError("time delta must be finite and non-negative")
    idx = window_indices(len(audio), audio.rate, t, window_half)
    emb = encoder.embed(audio.features[idx])
    pooled, _ = audio_attention_pool(emb, encoder.logits)
    return np.concatenate([pooled, temporal_embedding(t, time_embedding, time_frequencies)])


def apply_dynamic_offsets(splats: SplatSet, offsets) -> SplatSet:
    offsets = np.asarray(offsets)
    if offsets.shape != (len(splats), 3):
        raise ShapeError(f"offsets {offsets.shape} do not match {len(splats)} splats")
    if not np.all(np.isfinite(offsets)):
        raise ValidationError("offsets must be finite")
    return splats.with_positions(splats.positions + offsets.astype(splats.dtype))


# --------------------------------------------------------------------------
# offset head


@dataclass(frozen=True)
class OffsetHead:
    """Two-layer per-splat map, FiLM-modulated by the condition vector.

    ``h = W1 x + b1``; ``z = gamma * h + beta`` with ``gamma = bg + Wg c`` and
    ``beta = bb + Wb c``; offset ``= W2 tanh(z) + b2``. The input ``x`` is the
    normalised splat position followed by a learned per-splat latent.
    """

    W1: np.ndarray
    b1: np.ndarray
    Wg: np.ndarray
    bg: np.ndarray
    Wb: np.ndarray
    bb: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    center: np.ndarray
    extent: float = 1.0

    TRAINABLE = ("W1", "b1", "Wg", "bg", "Wb", "bb", "W2", "b2")

    @classmethod
    def init(cls, positions, condition_dim, latent_dim=8, hidden=32, seed=0):
        rng = np.random.default_rng(seed)
        positions = np.asarray(positions, dtype=np.float64)
        center = positions.mean(axis=0)
        extent = float(np.max(np.abs(positions - center))) or 1.0
        p = 3 + latent_dim
        return cls(
            W1=rng.normal(0, 1 / np.sqrt(p), (hidden, p)),
            b1=np.zeros(hidden),
            Wg=rng.normal(0, 0.1 / np.sqrt(condition_dim), (hidden, condition_dim)),
            bg=np.ones(hidden),
            Wb=rng.normal(0, 1 / np.sqrt(condition_dim), (hidden, condition_dim)),
            bb=np.zeros(hidden),
            W2=np.zeros((3, hidden)),
            b2=np.zeros(3),
            center=center,
            extent=extent,
        )

    @property
    def latent_dim(self):
        return self.W1.shape[1] - 3

    @property
    def condition_dim(self):
        return self.Wg.shape[1]

    def trainable(self):
        return {k: getattr(self, k) for k in self.TRAINABLE}

    def replace(self, **arrays):
        return replace(self, **arrays)

    def film_params(self, condition):
        c = np.asarray(condition, dtype=np.float64)
        if c.shape != (self.condition_dim,):
            raise ShapeError(f"condition has shape {c.shape}, head expects ({self.condition_dim},)")
        return self.bg + self.Wg @ c, self.bb + self.Wb @ c

    def to_arrays(self):
        d = {f.name: np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}
        d["extent"] = np.array([self.extent])
        return d

    @classmethod
    def from_arrays(cls, d):
        kw = {f.name: np.asarray(d[f.name], dtype=np.float64) for f in fields(cls)}
        kw["extent"] = float(np.asarray(d["extent"]).reshape(-1)[0])
        return cls(**kw)


@dataclass(frozen=True)
class HeadCache:
    x: np.ndarray
    h: np.ndarray
    a: np.ndarray
    gamma: np.ndarray
    condition: np.ndarray


def head_features(head: OffsetHead, positions, latents):
    positions = np.asarray(positions, dtype=np.float64)
    latents = np.asarray(latents, dtype=np.float64)
    if latents.shape != (len(positions), head.latent_dim):
        raise ShapeError(f"latents {latents.shape} do not match ({len(positions)}, {head.latent_dim})")
    return np.concatenate([(positions - head.center) / head.extent, latents], axis=1)


def offset_field(head: OffsetHead, positions, latents, gamma, beta, *, return_cache=False, condition=None):
    x = head_features(head, positions, latents)
    h = x @ head.W1.T + head.b1
    a = np.tanh(film(h, gamma, beta))
    out = a @ head.W2.T + head.b2
    if return_cache:
        return out, HeadCache(x, h, a, np.asarray(gamma), None if condition is None else np.asarray(condition))
    return out


def dynamic_offset_field(splats: SplatSet, condition, head: OffsetHead, latents, *, return_cache=False):
    """Per-splat offsets for one condition vector; zero while ``W2`` and ``b2`` are zero."""
    gamma, beta = head.film_params(condition)
    return offset_field(head, splats.positions, latents, gamma, beta, return_cache=return_cache,
                        condition=condition)


def dynamic_offset_backward(head: OffsetHead, cache: HeadCache, d_offsets):
    """Gradients of ``sum(d_offsets * offsets)`` w.r.t. head weights and latents.

    Splat positions enter the head as fixed features; no gradient flows to them.
    """
    G = np.asarray(d_offsets, dtype=np.float64)
    a, h, x, c = cache.a, cache.h, cache.x, cache.condition
    grads = {"W2": G.T @ a, "b2": G.sum(axis=0)}
    dz = (G @ head.W2) * (1 - a**2)
    d_gamma = np.sum(dz * h, axis=0)
    d_beta = dz.sum(axis=0)
    grads["bg"], grads["bb"] = d_gamma, d_beta
    grads["Wg"] = np.outer(d_gamma, c)
    grads["Wb"] = np.outer(d_beta, c)
    dh = dz * cache.gamma
    grads["W1"] = dh.T @ x
    grads["b1"] = dh.sum(axis=0)
    d_latents = (dh @ head.W1)[:, 3:]
    return grads, d_latents
