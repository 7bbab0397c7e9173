"""Negative-target synthesis and pair-gap statistics.

Strategies (all sample from the reference model, ``ref`` enabled):

* ``selfplay``: the negative is generated under the same clean condition as the
  positive.
* ``cdns``: both conditions are degraded. The image cue is derived from the
  full scene (its unmixed subject block plus ``leak`` times its context block)
  and the text is replaced by the generic prompt.
* ``cdns_img_only`` / ``cdns_text_only``: only one of the two degradations.
* ``dpo_sim``: two generations under the clean condition; the one with the
  higher fidelity oracle score becomes the positive (first wins ties).

Synthesis runs in fixed-size chunks that may execute on a thread pool. The
initial noise of each record comes from its own stream keyed by record index, so
results do not depend on chunk size, thread count or scheduling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SynthConfig
from .flow import SamplerConfig, row_noise, sample_chunked
from .io import load_arrays, save_arrays
from .model import FieldLayout, VelocityField
from .numcore import RngStream, tag_of
from .trainer import QuadSet
from .world import ConditionPair, Quadruplet, Triplet, World, cosine, fidelity_oracle

N_BINS = 50
PROVENANCES = ("cdns", "selfplay", "dpo_sim", "cdns_img_only", "cdns_text_only")


@dataclass
class GapStats:
    count: int
    mean: float
    std: float
    histogram: list
    bin_edges: list
    mass_below_08: int
    median_fidelity_gap: float | None = None

    def to_dict(self) -> dict:
        return {
            "count": self.count, "mean": self.mean, "std": self.std, "histogram": self.histogram,
            "bin_edges": self.bin_edges, "mass_below_08": self.mass_below_08,
            "median_fidelity_gap": self.median_fidelity_gap,
        }


@dataclass
class QuadDataset:
    """Columnar quadruplets; ``x_pos``/``x_neg`` rows pair up one-to-one."""

    x_pos: np.ndarray
    x_neg: np.ndarray
    cond: np.ndarray
    neg_cond: np.ndarray
    record_index: np.ndarray
    subject_id: np.ndarray
    context_id: np.ndarray
    degraded: np.ndarray
    provenance: list = field(default_factory=list)

    def __len__(self):
        return self.x_pos.shape[0]

    def quadset(self) -> QuadSet:
        return QuadSet(self.x_pos, self.x_neg, self.cond, list(self.provenance))

    def quadruplet(self, i: int, world: World) -> Quadruplet:
        k = world.spec.subject_dim
        c = self.cond[i]
        pair = ConditionPair(c[:k].copy(), c[k:-2].copy(), False, bool(c[-2]), bool(c[-1]))
        return Quadruplet(self.x_pos[i].copy(), pair, int(self.subject_id[i]), int(self.context_id[i]),
                          self.x_neg[i].copy(), self.provenance[i])

    def select(self, keep) -> "QuadDataset":
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return QuadDataset(self.x_pos[keep], self.x_neg[keep], self.cond[keep], self.neg_cond[keep],
                           self.record_index[keep], self.subject_id[keep], self.context_id[keep],
                           self.degraded[keep], [self.provenance[i] for i in keep])


# -- condition degradation -------------------------------------------------

def scene_image_cue(world: World, x_scene: np.ndarray, leak: float) -> np.ndarray:
    """Image cue taken from a full scene: subject block plus ``leak`` times context.

    The context block is truncated or zero-padded to the subject width.
    """
    k, m = world.spec.subject_dim, world.spec.context_dim
    z = world.unmix(x_scene)
    ctx = np.zeros((z.shape[0], k))
    w = min(k, m)
    ctx[:, :w] = z[:, k:k + w]
    return z[:, :k] + leak * ctx


def degrade_conditions(world: World, idx: np.ndarray, strategy: str, leak: float):
    """Condition rows for the negatives of records ``idx`` and their degraded flags.

    Returns fresh arrays; the world's records are not modified.
    """
    k = world.spec.subject_dim
    cond = world.cond_matrix(idx)
    degraded = np.zeros(len(idx), dtype=bool)
    if strategy in ("cdns", "cdns_img_only"):
        cond[:, :k] = scene_image_cue(world, world.x_tgt[idx], leak)
        degraded[:] = True
    if strategy in ("cdns", "cdns_text_only"):
        cond[:, k:-2] = 0.0
        cond[:, -2] = 1.0
    return cond, degraded


# -- sampling --------------------------------------------------------------

def reference_field(stack, layout: FieldLayout) -> VelocityField:
    if "ref" not in stack.adapters:
        raise ValueError("negative synthesis needs a stack with a 'ref' adapter")
    return VelocityField(stack, layout, {"ref"})


def synthesize(stack, layout: FieldLayout, world: World, indices, config: SynthConfig, seed: int,
               threads: int = 1) -> QuadDataset:
    """Build quadruplets for records ``indices`` with ``config.strategy``."""
    idx = np.asarray(indices, dtype=np.int64)
    field_ = reference_field(stack, layout)
    rng = RngStream(seed, tag_of(f"synth:{config.strategy}"))
    d = world.spec.data_dim
    strategy = config.strategy
    reps = config.n_per_triplet
    rows = np.repeat(idx, reps)
    draw = np.tile(np.arange(reps), len(idx))
    x1 = row_noise(rng, zip(rows, draw), d)
    clean = world.cond_matrix(rows)

    if strategy == "dpo_sim":
        x1b = row_noise(rng, zip(rows, draw + reps), d)
        both = sample_chunked(field_, np.concatenate([clean, clean]), config.sampler,
                            np.concatenate([x1, x1b]), config.chunk_size, threads)
        first, second = both[: len(rows)], both[len(rows):]
        sid = world.subject_id[rows]
        f1 = fidelity_oracle(first, sid, world)
        f2 = fidelity_oracle(second, sid, world)
        first_wins = (f1 >= f2)[:, None]
        x_pos = np.where(first_wins, first, second)
        x_neg = np.where(first_wins, second, first)
        neg_cond, degraded = clean.copy(), np.zeros(len(rows), dtype=bool)
    else:
        if strategy == "selfplay":
            neg_cond, degraded = clean.copy(), np.zeros(len(rows), dtype=bool)
        else:
            neg_cond, degraded = degrade_conditions(world, rows, strategy, config.leak)
        x_neg = sample_chunked(field_, neg_cond, config.sampler, x1, config.chunk_size, threads)
        x_pos = world.x_tgt[rows].copy()

    out = QuadDataset(x_pos, x_neg, clean, neg_cond, rows, world.subject_id[rows].copy(),
                      world.context_id[rows].copy(), degraded, [strategy] * len(rows))
    if config.filter_max_similarity is not None:
        sim = pair_similarity(out.x_pos, out.x_neg, world)
        out = out.select(sim <= config.filter_max_similarity)
    return out


def _one(stack, layout, world: World, triplet_index: int, strategy: str, sampler: SamplerConfig,
         rng_seed: int, leak: float = 0.5) -> Quadruplet:
    cfg = SynthConfig(strategy=strategy, sampler=sampler, leak=leak)
    ds = synthesize(stack, layout, world, [triplet_index], cfg, rng_seed)
    return ds.quadruplet(0, world)


def synth_selfplay(stack, layout, world: World, triplet_index: int, sampler: SamplerConfig, seed: int):
    return _one(stack, layout, world, triplet_index, "selfplay", sampler, seed)


def synth_cdns(stack, layout, world: World, triplet_index: int, sampler: SamplerConfig, seed: int,
               leak: float = 0.5):
    return _one(stack, layout, world, triplet_index, "cdns", sampler, seed, leak)


def synth_dpo_sim(stack, layout, world: World, triplet_index: int, sampler: SamplerConfig, seed: int):
    return _one(stack, layout, world, triplet_index, "dpo_sim", sampler, seed)


def cdns_condition(world: World, triplet: Triplet, leak: float = 0.5) -> ConditionPair:
    """Degraded condition of a single triplet (scene image cue, generic text)."""
    cue = scene_image_cue(world, triplet.x_tgt, leak)[0]
    return ConditionPair(cue, np.zeros_like(triplet.cond.c_text), degraded_flag=True, generic_flag=True)


# -- statistics ------------------------------------------------------------

def pair_similarity(x_pos: np.ndarray, x_neg: np.ndarray, world: World) -> np.ndarray:
    """Cosine between the unmixed subject blocks of each positive and negative."""
    k = world.spec.subject_dim
    cos, _ = cosine(world.unmix(x_pos)[:, :k], world.unmix(x_neg)[:, :k])
    return cos


def gap_stats_from_similarity(sim: np.ndarray, fidelity_gap: np.ndarray | None = None) -> GapStats:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.size == 0:
        raise ValueError("pair_gap_stats needs at least one pair")
    edges = -1.0 + 0.04 * np.arange(N_BINS + 1)
    bins = np.clip(np.floor((sim + 1.0) / 0.04).astype(np.int64), 0, N_BINS - 1)
    hist = np.bincount(bins, minlength=N_BINS)
    med = None if fidelity_gap is None else float(np.median(np.abs(fidelity_gap)))
    return GapStats(int(sim.size), float(np.mean(sim)), float(np.std(sim)), hist.tolist(),
                    [round(float(e), 10) for e in edges], int(np.sum(sim < 0.8)), med)


def pair_gap_stats(quads: QuadDataset, world: World) -> GapStats:
    sim = pair_similarity(quads.x_pos, quads.x_neg, world)
    gap = fidelity_oracle(quads.x_pos, quads.subject_id, world) - fidelity_oracle(quads.x_neg, quads.subject_id,
                                                                                   world)
    return gap_stats_from_similarity(sim, gap)


# -- files -----------------------------------------------------------------

def save_quads(directory, quads: QuadDataset, manifest: dict) -> None:
    kinds = sorted(set(quads.provenance))
    codes = np.array([kinds.index(p) for p in quads.provenance], dtype=np.int64)
    arrays = {
        "x_pos": quads.x_pos, "x_neg": quads.x_neg, "cond": quads.cond, "neg_cond": quads.neg_cond,
        "record_index": quads.record_index, "subject_id": quads.subject_id, "context_id": quads.context_id,
        "degraded": quads.degraded.astype(np.int8), "provenance_code": codes,
    }
    man = dict(manifest)
    man.update({"kind": "quadruplets", "provenance_names": kinds, "count": len(quads)})
    save_arrays(directory, arrays, man)


def load_quads(directory) -> tuple[dict, QuadDataset]:
    manifest, a = load_arrays(directory)
    if manifest.get("kind") != "quadruplets":
        raise ValueError(f"{directory}: not a quadruplet dataset")
    names = manifest["provenance_names"]
    prov = [names[int(c)] for c in a["provenance_code"]]
    return manifest, QuadDataset(a["x_pos"], a["x_neg"], a["cond"], a["neg_cond"], a["record_index"],
                                 a["subject_id"], a["context_id"], a["degraded"].astype(bool), prov)
