"""Flow-matching paths, velocity targets and a guided Euler sampler.

Time runs from data (t=0) to noise (t=1); sampling integrates 1 -> 0.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .numcore import NonFiniteError, RngStream


@dataclass(frozen=True)
class PathPoint:
    x_t: np.ndarray
    t: float
    eps: np.ndarray
    velocity_target: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 28
    guidance_scale: float = 3.5
    cond_dropout_p: float = 0.1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"sampler.steps must be >= 1, got {self.steps}")
        if self.guidance_scale < 0:
            raise ValueError(f"sampler.guidance_scale must be >= 0, got {self.guidance_scale}")
        if not 0 <= self.cond_dropout_p < 1:
            raise ValueError(f"sampler.cond_dropout_p must be in [0, 1), got {self.cond_dropout_p}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "guidance_scale": self.guidance_scale, "cond_dropout_p": self.cond_dropout_p}

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        unknown = set(d) - {"steps", "guidance_scale", "cond_dropout_p"}
        if unknown:
            raise ValueError(f"unknown sampler keys: {sorted(unknown)}")
        base = cls()
        return cls(int(d.get("steps", base.steps)), float(d.get("guidance_scale", base.guidance_scale)),
                   float(d.get("cond_dropout_p", base.cond_dropout_p)))


def interpolate(x0, eps, t) -> PathPoint:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return PathPoint((1.0 - t) * x0 + t * eps, float(t), eps, eps - x0)


def interpolate_batch(x0: np.ndarray, eps: np.ndarray, t: np.ndarray):
    """Row-wise ``(x_t, velocity_target)`` for per-row timesteps ``t``."""
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    tc = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    return (1.0 - tc) * x0 + tc * eps, eps - x0


def cfg_velocity(model, x_t, t, condition, null_condition, scale: float):
    """Classifier-free guided velocity ``v_null + scale * (v_cond - v_null)``."""
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    if scale == 1.0:
        return model(x_t, t, condition)
    v_null = model(x_t, t, null_condition)
    if scale == 0.0:
        return v_null
    v_cond = model(x_t, t, condition)
    return v_null + scale * (v_cond - v_null)


def euler_sample(model, condition, config: SamplerConfig, rng: RngStream, null_condition=None,
                 x1: np.ndarray | None = None) -> np.ndarray:
    """Integrate ``dx/dt = v`` from noise at t=1 down to t=0 with uniform Euler steps.

    ``condition`` is one condition row or a batch ``(n, cond_dim)``; one sample per
    row is returned. ``model`` must expose ``data_dim``. Guidance uses
    ``null_condition`` (or ``model.null_condition(n)``) unless the scale is 1.
    """
    cond = np.asarray(condition, dtype=np.float64)
    single = cond.ndim == 1
    cond = np.atleast_2d(cond)
    n = cond.shape[0]
    if x1 is None:
        x = rng.normal((n, model.data_dim))
    else:
        x = np.array(x1, dtype=np.float64).reshape(n, -1)
    scale = config.guidance_scale
    null = None
    if scale != 1.0:
        null = null_condition if null_condition is not None else model.null_condition(n)
        null = np.broadcast_to(np.atleast_2d(null), cond.shape)
    dt = 1.0 / config.steps
    for i in range(config.steps):
        t = np.full(n, 1.0 - i * dt)
        v = cfg_velocity(model, x, t, cond, null, scale)
        if v.shape != x.shape:
            raise ValueError(f"model output shape {v.shape} != state shape {x.shape}")
        x = x - dt * v
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(f"non-finite sampler state at step {i}")
    return x[0] if single else x


def sample_chunked(model, condition: np.ndarray, config: SamplerConfig, x1: np.ndarray, chunk_size: int = 256,
                   threads: int = 1, null_condition=None) -> np.ndarray:
    """Sample one output per condition row from given initial noise ``x1``.

    Rows are processed in fixed chunks, optionally on a thread pool. Each row's
    result depends only on its own condition and noise, so the output is the
    same for any chunk size or thread count.
    """
    cond = np.atleast_2d(np.asarray(condition, dtype=np.float64))
    if x1.shape[0] != cond.shape[0]:
        raise ValueError(f"{x1.shape[0]} noise rows for {cond.shape[0]} conditions")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    bounds = [(s, min(s + chunk_size, len(cond))) for s in range(0, len(cond), chunk_size)]

    def run(b):
        lo, hi = b
        null = None if null_condition is None else np.atleast_2d(null_condition)[: hi - lo]
        return euler_sample(model, cond[lo:hi], config, None, null_condition=null, x1=x1[lo:hi])

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    if not parts:
        return np.zeros((0, model.data_dim))
    return np.concatenate(parts, axis=0)


def row_noise(rng: RngStream, keys, dim: int) -> np.ndarray:
    """Initial noise with one independent stream per key (record index, draw)."""
    keys = list(keys)
    if not keys:
        return np.zeros((0, dim))
    out = np.empty((len(keys), dim))
    for r, key in enumerate(keys):
        s = rng
        for part in np.atleast_1d(key):
            s = s.split(int(part))
        out[r] = s.normal(dim)
    return out
