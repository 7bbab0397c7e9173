"""Training stages: base pretraining, supervised adapter fine-tuning, pairwise fine-tuning."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdapterStack, LowRankAdapter, grad_mask
from .config import TrainConfig
from .io import Checkpoint, JsonlWriter
from .model import FieldLayout
from .numcore import AdamState, MlpSpec, RngStream, adam_step, init_params, tag_of
from .objectives import QuadBatch, sfo_loss, sft_loss
from .schedule import sample_t

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TargetSet:
    """Supervised targets with their condition rows.

    ``text_cols`` marks the context-embedding columns and ``generic_col`` the
    generic-prompt flag, so text dropout can swap in the generic prompt.
    """

    x: np.ndarray
    cond: np.ndarray
    text_cols: slice | None = None
    generic_col: int | None = None

    def __len__(self):
        return self.x.shape[0]


@dataclass
class QuadSet:
    x_pos: np.ndarray
    x_neg: np.ndarray
    cond: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self):
        return self.x_pos.shape[0]


def apply_dropout(cond: np.ndarray, rng: RngStream, p_null: float, p_text: float,
                  text_cols: slice | None, generic_col: int | None) -> np.ndarray:
    """Replace rows by the null condition w.p. ``p_null`` or by the generic prompt w.p. ``p_text``."""
    cond = cond.copy()
    u = rng.uniform(cond.shape[0])
    if p_text > 0 and text_cols is not None:
        gen = (u >= p_null) & (u < p_null + p_text)
        cond[gen, text_cols] = 0.0
        cond[gen, generic_col] = 1.0
    if p_null > 0:
        null = u < p_null
        cond[null] = 0.0
        cond[null, -1] = 1.0
    return cond


def _check_loss(value: float, it: int, stack, layout, config, root, last_good):
    if not np.isfinite(value):
        ckpt = last_good or Checkpoint(stack, layout, config.to_dict(), it, root.state())
        raise TrainingDiverged(f"loss became non-finite at iteration {it}", ckpt)


def _optimize(stack: AdapterStack, layout: FieldLayout, config: TrainConfig, trainable: set,
              step_fn, root: RngStream, metrics: JsonlWriter | None, eval_fn, stage: str):
    """Shared Adam loop. ``step_fn(stack, r) -> (loss_metrics, grads)``."""
    mask = grad_mask(stack, trainable)
    state = AdamState()
    opt = config.optimizer
    timings = []
    last_good = None
    for it in range(config.iterations):
        t0 = time.perf_counter()
        if eval_fn is not None and config.eval_every and it % config.eval_every == 0:
            ev = eval_fn(stack, it)
        else:
            ev = None
        lm, grads = step_fn(stack, root.split(it))
        _check_loss(lm["loss"], it, stack, layout, config, root, last_good)
        grads = mask(grads)
        params = stack.named_params()
        new, state = adam_step({k: params[k] for k in grads}, grads, state, opt.lr, opt.beta1, opt.beta2,
                               opt.eps)
        stack = stack.with_params(new)
        rec = {"iteration": it, "stage": stage, **lm}
        if ev is not None:
            rec["eval"] = ev
        if metrics is not None:
            metrics.write(rec)
        timings.append((time.perf_counter() - t0) * 1e3)
        if it % 100 == 0:
            log.debug("%s it=%d loss=%.6f", stage, it, lm["loss"])
    if eval_fn is not None and config.eval_every and metrics is not None:
        metrics.write({"iteration": config.iterations, "stage": stage, "eval": eval_fn(stack, config.iterations)})
    return stack, timings


def _sft_step(layout, data: TargetSet, config: TrainConfig, enabled, trainable):
    def step(stack, r):
        idx = r.split(1).integers(len(data), config.batch_size)
        x = data.x[idx]
        cond = apply_dropout(data.cond[idx], r.split(4), config.cond_dropout_p, config.text_dropout_p,
                             data.text_cols, data.generic_col)
        eps = r.split(2).normal(x.shape)
        t = sample_t(config.timestep, r.split(3), config.batch_size)
        value, grads = sft_loss(stack, layout, x, cond, t, eps, enabled, trainable)
        return {"loss": value}, grads
    return step


def pretrain_base(data: TargetSet, layout: FieldLayout, config: TrainConfig,
                  metrics: JsonlWriter | None = None, eval_fn=None) -> Checkpoint:
    """Train a fresh base network with the supervised flow-matching loss."""
    if config.stage != "pretrain":
        raise ValueError(f"pretrain_base needs stage 'pretrain', got {config.stage!r}")
    root = RngStream(config.seed, tag_of("pretrain"))
    spec = MlpSpec(layout.input_dim, config.hidden_widths, layout.data_dim, config.activation)
    stack = AdapterStack(spec, init_params(spec, root.split(tag_of("init"))))
    step = _sft_step(layout, data, config, frozenset(), {"base"})
    stack, timings = _optimize(stack, layout, config, {"base"}, step, root.split(tag_of("steps")), metrics,
                               eval_fn, "pretrain")
    return Checkpoint(stack, layout, config.to_dict(), config.iterations, root.state(),
                      {"stage": "pretrain"})


def train_sft(ckpt: Checkpoint, data: TargetSet, config: TrainConfig,
              metrics: JsonlWriter | None = None, eval_fn=None) -> Checkpoint:
    """Attach a supervised adapter (default name ``ref``) and train only it."""
    name = config.adapter_name or "ref"
    root = RngStream(config.seed, tag_of(f"sft:{name}"))
    stack = ckpt.stack.attach(name, config.adapter_rank, root.split(tag_of("init")))
    step = _sft_step(ckpt.layout, data, config, stack.enabled, {name})
    stack, _ = _optimize(stack, ckpt.layout, config, {name}, step, root.split(tag_of("steps")), metrics,
                         eval_fn, "sft")
    return Checkpoint(stack, ckpt.layout, config.to_dict(), config.iterations, root.state(),
                      {"stage": "sft", "adapter": name, "parent": ckpt.content_hash()})


def check_provenance(quads: QuadSet, allow_mixed: bool) -> None:
    kinds = sorted(set(quads.provenance))
    if len(kinds) > 1 and not allow_mixed:
        raise ValueError(f"quadruplets mix provenances {kinds}; set allow_mixed_provenance to accept")


def train_sfo(ckpt: Checkpoint, quads: QuadSet, config: TrainConfig,
              metrics: JsonlWriter | None = None, eval_fn=None) -> Checkpoint:
    """Pairwise fine-tuning against the frozen reference ``ref``.

    Default: attach ``sfo`` and train only it, reference = ``{ref}``, policy =
    ``{ref, sfo}``. With ``direct_sfo`` the ``ref`` adapter itself is trained and
    a frozen copy (``ref_frozen``) serves as the reference.
    """
    if "ref" not in ckpt.stack.adapters:
        raise ValueError("train_sfo needs a checkpoint with a 'ref' adapter")
    check_provenance(quads, config.allow_mixed_provenance)
    layout = ckpt.layout
    name = config.adapter_name or "sfo"
    root = RngStream(config.seed, tag_of(f"sfo:{name}"))
    stack = ckpt.stack.set_enabled({"ref"})
    if config.direct_sfo:
        ref = stack.adapters["ref"]
        frozen = LowRankAdapter("ref_frozen", ref.rank, [a.copy() for a in ref.A], [b.copy() for b in ref.B],
                                ref.scale)
        adapters = dict(stack.adapters)
        adapters["ref_frozen"] = frozen
        stack = AdapterStack(stack.spec, stack.base, adapters, frozenset({"ref"}))
        policy, reference, trainable = {"ref"}, {"ref_frozen"}, {"ref"}
    else:
        stack = stack.attach(name, config.adapter_rank, root.split(tag_of("init")))
        policy, reference, trainable = {"ref", name}, {"ref"}, {name}

    if config.loss_kind == "sft":
        data = TargetSet(quads.x_pos, quads.cond)
        cfg = config.replace(cond_dropout_p=0.0, text_dropout_p=0.0)
        step = _sft_step(layout, data, cfg, frozenset(policy), trainable)
    else:
        def step(stack, r):
            idx = r.split(1).integers(len(quads), config.batch_size)
            eps = r.split(2).normal((config.batch_size, layout.data_dim))
            t = sample_t(config.timestep, r.split(3), config.batch_size)
            quad = QuadBatch(quads.x_pos[idx], quads.x_neg[idx], quads.cond[idx], eps, t)
            out, grads = sfo_loss(stack, layout, quad, config.beta, policy, reference, trainable)
            return out.metrics(), grads

    stack = stack.set_enabled(policy)
    stack, _ = _optimize(stack, layout, config, trainable, step, root.split(tag_of("steps")), metrics, eval_fn,
                         "sfo")
    if config.direct_sfo:
        adapters = {k: v for k, v in stack.adapters.items() if k != "ref_frozen"}
        stack = AdapterStack(stack.spec, stack.base, adapters, frozenset({"ref"}))
    return Checkpoint(stack, layout, config.to_dict(), config.iterations, root.state(),
                      {"stage": "sfo", "adapter": "ref" if config.direct_sfo else name,
                       "parent": ckpt.content_hash()})
