"""Training-time timestep distributions p(t)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import RngStream

T_CLAMP = 1e-9


@dataclass(frozen=True)
class TimestepDist:
    variant: str = "logit_normal"
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.variant not in ("uniform", "logit_normal"):
            raise ValueError(f"timestep.variant must be 'uniform' or 'logit_normal', got {self.variant!r}")
        if self.variant == "logit_normal" and not self.sigma > 0:
            raise ValueError(f"timestep.sigma must be > 0, got {self.sigma}")

    @classmethod
    def uniform(cls) -> "TimestepDist":
        return cls("uniform", 0.0, 1.0)

    @classmethod
    def logit_normal(cls, mu: float = 0.0, sigma: float = 1.0) -> "TimestepDist":
        return cls("logit_normal", float(mu), float(sigma))

    @property
    def label(self) -> str:
        if self.variant == "uniform":
            return "uniform"
        return f"logit_normal({self.mu:g},{self.sigma:g})"

    def to_dict(self) -> dict:
        if self.variant == "uniform":
            return {"variant": "uniform"}
        return {"variant": self.variant, "mu": self.mu, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d: dict) -> "TimestepDist":
        unknown = set(d) - {"variant", "mu", "sigma"}
        if unknown:
            raise ValueError(f"unknown timestep keys: {sorted(unknown)}")
        variant = d.get("variant", "logit_normal")
        if variant == "uniform":
            return cls.uniform()
        return cls(variant, float(d.get("mu", 0.0)), float(d.get("sigma", 1.0)))


def logistic(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def t_from_normal(dist: TimestepDist, z):
    """Map standard-normal draws ``z`` to timesteps under a logit-normal ``dist``."""
    return np.clip(logistic(dist.mu + dist.sigma * np.asarray(z)), T_CLAMP, 1.0 - T_CLAMP)


def sample_t(dist: TimestepDist, rng: RngStream, size=None):
    if dist.variant == "uniform":
        t = rng.uniform(size)
    else:
        t = t_from_normal(dist, rng.normal(size))
    return np.clip(t, T_CLAMP, 1.0 - T_CLAMP)


def logit_moments(samples) -> tuple[float, float]:
    """Sample mean and (population) std of ``logit(t)``."""
    t = np.asarray(samples, dtype=np.float64)
    if np.any((t <= 0.0) | (t >= 1.0)):
        raise ValueError("logit_moments needs every sample strictly inside (0, 1)")
    z = np.log(t) - np.log1p(-t)
    return float(z.mean()), float(z.std())
