"""Adam over named parameter arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mlp import NonFiniteError


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Only names present in ``grads`` move.

    Returns new ``(params, state)``; the inputs are not modified.
    """
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name in sorted(grads):
        g = grads[name]
        m = beta1 * m_all.get(name, 0.0) + (1.0 - beta1) * g
        v = beta2 * v_all.get(name, 0.0) + (1.0 - beta2) * g * g
        m_all[name], v_all[name] = m, v
        new_params[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, AdamState(step, m_all, v_all)
