"""Supervised flow-matching loss and the pairwise fidelity-optimization loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterStack
from .flow import interpolate_batch
from .model import FieldLayout, VelocityField

LN2 = float(np.log(2.0))


class LossError(FloatingPointError):
    pass


def softplus(x):
    """``log(1 + e^x)`` without overflow."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class QuadBatch:
    """Positive/negative targets sharing one condition, noise draw and timestep per pair."""

    x_pos: np.ndarray
    x_neg: np.ndarray
    cond: np.ndarray
    eps: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        n = self.x_pos.shape[0]
        if self.x_neg.shape != self.x_pos.shape or self.eps.shape != self.x_pos.shape:
            raise ValueError(
                f"x_pos {self.x_pos.shape}, x_neg {self.x_neg.shape}, eps {self.eps.shape} must match")
        if self.cond.shape[0] != n or np.asarray(self.t).shape != (n,):
            raise ValueError(f"cond/t batch sizes must equal {n}")

    def __len__(self):
        return self.x_pos.shape[0]


@dataclass
class LossOut:
    value: float
    err_pos_policy: np.ndarray
    err_neg_policy: np.ndarray
    err_pos_ref: np.ndarray
    err_neg_ref: np.ndarray
    beta: float

    @property
    def delta_policy(self) -> np.ndarray:
        return self.err_pos_policy - self.err_neg_policy

    @property
    def delta_ref(self) -> np.ndarray:
        return self.err_pos_ref - self.err_neg_ref

    @property
    def inner(self) -> np.ndarray:
        return self.delta_policy - self.delta_ref

    @property
    def per_example(self) -> list[dict]:
        keys = ("err_pos_policy", "err_neg_policy", "err_pos_ref", "err_neg_ref")
        cols = [getattr(self, k) for k in keys] + [self.delta_policy, self.delta_ref, self.inner]
        names = keys + ("delta_policy", "delta_ref", "inner")
        return [dict(zip(names, map(float, row))) for row in zip(*cols)]

    def metrics(self) -> dict:
        return {
            "loss": float(self.value),
            "delta_policy": float(self.delta_policy.mean()),
            "delta_ref": float(self.delta_ref.mean()),
            "inner": float(self.inner.mean()),
            "implicit_acc": float(np.mean(self.inner < 0)),
        }


def sfo_value(err_pos_policy, err_neg_policy, err_pos_ref, err_neg_ref, beta: float) -> float:
    """Batch-mean ``-log sigmoid(-beta * (delta_policy - delta_ref))`` from per-example errors."""
    inner = (np.asarray(err_pos_policy) - err_neg_policy) - (np.asarray(err_pos_ref) - err_neg_ref)
    return float(np.mean(softplus(beta * inner)))


def _row_errors(field: VelocityField, x0, cond, t, eps):
    x_t, target = interpolate_batch(x0, eps, t)
    pred = field(x_t, t, cond)
    resid = pred - target
    return np.mean(resid * resid, axis=1), resid, x_t


def sft_loss(stack: AdapterStack, layout: FieldLayout, x_tgt, cond, t, eps, enabled=None,
             trainable=None, with_grads: bool = True):
    """Mean squared velocity error over batch and data dims.

    Returns ``(value, grads)``; ``grads`` holds only ``trainable`` parameters
    (``None`` -> base and all enabled adapters).
    """
    x_tgt = np.atleast_2d(np.asarray(x_tgt, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    if x_tgt.shape != eps.shape:
        raise ValueError(f"x_tgt shape {x_tgt.shape} != eps shape {eps.shape}")
    field = VelocityField(stack, layout, enabled)
    err, resid, x_t = _row_errors(field, x_tgt, cond, t, eps)
    value = float(err.mean())
    if not with_grads:
        return value, {}
    upstream = 2.0 * resid / resid.size
    return value, field.grads(x_t, t, cond, upstream, trainable)


def delta(stack: AdapterStack, layout: FieldLayout, enabled, x_pos, x_neg, cond, t, eps):
    """Per-example positive error minus negative error under one shared ``(t, eps)``."""
    field = VelocityField(stack, layout, enabled)
    err_pos, _, _ = _row_errors(field, x_pos, cond, t, eps)
    err_neg, _, _ = _row_errors(field, x_neg, cond, t, eps)
    return err_pos - err_neg


def sfo_loss(stack: AdapterStack, layout: FieldLayout, quad: QuadBatch, beta: float,
             policy_enabled=("ref", "sfo"), ref_enabled=("ref",), trainable=("sfo",),
             with_grads: bool = True):
    """Pairwise loss against the frozen reference; returns ``(LossOut, grads)``.

    Positive and negative rows go through each network as one stacked batch with
    repeated condition, noise and timestep.
    """
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    n = len(quad)
    x0 = np.concatenate([quad.x_pos, quad.x_neg])
    eps = np.concatenate([quad.eps, quad.eps])
    t = np.concatenate([quad.t, quad.t])
    cond = np.concatenate([quad.cond, quad.cond])

    ref = VelocityField(stack, layout, ref_enabled)
    ref_err, _, _ = _row_errors(ref, x0, cond, t, eps)
    policy = VelocityField(stack, layout, policy_enabled)
    pol_err, resid, x_t = _row_errors(policy, x0, cond, t, eps)

    out = LossOut(0.0, pol_err[:n], pol_err[n:], ref_err[:n], ref_err[n:], float(beta))
    z = beta * out.inner
    if not np.all(np.isfinite(z)):
        bad = int(np.flatnonzero(~np.isfinite(z))[0])
        raise LossError(f"non-finite inner term at example {bad}")
    out.value = float(np.mean(softplus(z)))
    if not with_grads:
        return out, {}
    # d loss / d err_pos = beta * sigmoid(z) / n ; d loss / d err_neg is its negative
    w = beta * sigmoid(z) / n
    sign = np.concatenate([w, -w]).reshape(-1, 1)
    upstream = sign * 2.0 * resid / resid.shape[1]
    return out, policy.grads(x_t, t, cond, upstream, set(trainable))
