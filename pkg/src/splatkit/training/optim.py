"""AdamW with decoupled weight decay over dicts of numpy arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..core import DivergenceError


@dataclass
class AdamWState:
    lr: float = 2.5e-5
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    # per-parameter learning-rate multipliers; 0 freezes a parameter
    lr_scale: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState):
    """One AdamW update; returns ``(new_params, new_state)`` and leaves inputs untouched.

    Parameters without a gradient entry are passed through unchanged.
    """
    for k, g in grads.items():
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient for {k!r} has shape {np.shape(g)}, parameter {np.shape(params[k])}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k!r}")
    b1, b2 = state.betas
    t = state.step + 1
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    for k, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = b1 * state.m.get(k, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(k, 0.0) + (1 - b2) * g * g
        m_new[k], v_new[k] = m, v
        lr = state.lr * state.lr_scale.get(k, 1.0)
        if lr == 0:
            continue
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = params[k]
        new_params[k] = theta - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * theta)
    new_state = AdamWState(state.lr, state.betas, state.eps, state.weight_decay, t, m_new, v_new,
                           dict(state.lr_scale))
    return new_params, new_state
