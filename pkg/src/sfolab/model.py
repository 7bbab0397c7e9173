"""Network input layout and the velocity-field view of an adapter stack."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterStack


@dataclass(frozen=True)
class FieldLayout:
    """How ``(x_t, t, condition)`` is packed into one MLP input row.

    Time is encoded as ``[t, sin(pi 2^j t), cos(pi 2^j t)]`` for ``j < n_freq``.
    The condition row's last entry is the null flag used for guidance.
    """

    data_dim: int
    cond_dim: int
    n_freq: int = 3

    @property
    def input_dim(self) -> int:
        return self.data_dim + 1 + 2 * self.n_freq + self.cond_dim

    def time_features(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        freqs = np.pi * 2.0 ** np.arange(self.n_freq)
        return np.concatenate([t, np.sin(t * freqs), np.cos(t * freqs)], axis=1)

    def encode(self, x_t, t, cond) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        n = x_t.shape[0]
        cond = np.broadcast_to(np.atleast_2d(np.asarray(cond, dtype=np.float64)), (n, self.cond_dim))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        return np.concatenate([x_t, self.time_features(t), cond], axis=1)

    def null_condition(self, n: int = 1) -> np.ndarray:
        c = np.zeros((n, self.cond_dim))
        c[:, -1] = 1.0
        return c

    def to_dict(self) -> dict:
        return {"data_dim": self.data_dim, "cond_dim": self.cond_dim, "n_freq": self.n_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldLayout":
        return cls(int(d["data_dim"]), int(d["cond_dim"]), int(d.get("n_freq", 3)))


class VelocityField:
    """Callable ``v(x_t, t, cond)`` backed by a stack with a fixed enabled set."""

    def __init__(self, stack: AdapterStack, layout: FieldLayout, enabled=None):
        self.stack = stack
        self.layout = layout
        self.enabled = stack.enabled if enabled is None else frozenset(enabled)
        self.data_dim = layout.data_dim

    def __call__(self, x_t, t, cond) -> np.ndarray:
        return self.stack.forward(self.layout.encode(x_t, t, cond), self.enabled)

    def null_condition(self, n: int = 1) -> np.ndarray:
        return self.layout.null_condition(n)

    def grads(self, x_t, t, cond, upstream, trainable=None):
        inp = self.layout.encode(x_t, t, cond)
        g, _ = self.stack.backward(inp, upstream, self.enabled, trainable)
        return g
