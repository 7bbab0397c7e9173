"""Presets, datasets and the staged pipelines behind the CLI and the ablation grid.

Two presets ship with the package:

* ``toy-cars``: a 2-D colour mixture. A base model learns every mode; then a
  supervised adapter on the target mode is compared with a pairwise adapter
  that also sees the other modes as negatives.
* ``subject-world``: a text-only base model on training scenes, a supervised
  ``ref`` adapter that learns to use the image cue, negative synthesis, pairwise
  fine-tuning, and evaluation on held-out subjects.
"""
from __future__ import annotations

import copy
import json
import logging
from importlib import resources
from pathlib import Path

import numpy as np

from .config import EvalSpec, SynthConfig, TrainConfig
from .evalkit import field_of, subject_sweep, target_mode_ratio
from .flow import row_noise, sample_chunked
from .io import Checkpoint, JsonlWriter, load_arrays, save_arrays
from .model import FieldLayout, VelocityField
from .negatives import QuadDataset, pair_gap_stats, synthesize
from .numcore import RngStream, tag_of
from .trainer import QuadSet, TargetSet, pretrain_base, train_sfo, train_sft
from .world import CAR_COND_DIM, CarMixture, World, WorldSpec, gen_car_mixture, gen_world

log = logging.getLogger(__name__)

PRESET_NAMES = ("toy-cars", "subject-world")


def load_preset(name: str) -> dict:
    if name not in PRESET_NAMES:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
    text = resources.files("sfolab").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def stage_config(preset: dict, stage_key: str, seed: int, overrides: dict | None = None) -> TrainConfig:
    d = copy.deepcopy(preset[stage_key])
    d.update(overrides or {})
    d["seed"] = seed
    return TrainConfig.from_dict(d)


# -- datasets --------------------------------------------------------------

def build_dataset(preset_name: str, seed: int, preset: dict | None = None):
    preset = preset or load_preset(preset_name)
    if preset["kind"] == "toy-cars":
        return gen_car_mixture(seed=seed, **preset["mixture"])
    return gen_world(WorldSpec.from_dict(preset["world"]), seed)


def save_dataset(directory, data, preset_name: str, preset: dict, seed: int) -> None:
    man = {"kind": preset["kind"], "preset": preset_name, "preset_config": preset, "seed": seed}
    if isinstance(data, CarMixture):
        man["sigma"] = data.sigma
    else:
        man["world_spec"] = data.spec.to_dict()
    save_arrays(directory, data.arrays(), man)


def load_dataset(directory):
    """Returns ``(manifest, World | CarMixture)``."""
    man, a = load_arrays(directory)
    kind = man.get("kind")
    if kind == "toy-cars":
        data = CarMixture(a["centers"], float(man["sigma"]), a["positives"], a["negatives"], a["negative_modes"],
                          a["broad"], a["broad_modes"], int(man["seed"]))
    elif kind == "subject-world":
        data = World.from_arrays(WorldSpec.from_dict(man["world_spec"]), int(man["seed"]), a)
    else:
        raise ValueError(f"{directory}: not a generated dataset (kind={kind!r})")
    return man, data


def layout_for(data) -> FieldLayout:
    if isinstance(data, CarMixture):
        return FieldLayout(2, CAR_COND_DIM)
    return FieldLayout(data.spec.data_dim, data.spec.cond_dim)


def pretrain_targets(data) -> TargetSet:
    """Broad data for the base model. Subject scenes are text-conditioned only."""
    if isinstance(data, CarMixture):
        return TargetSet(data.broad, data.condition(len(data.broad)))
    k, m = data.spec.subject_dim, data.spec.context_dim
    idx = data.indices("train")
    cond = data.cond_matrix(idx)
    cond[:, :k] = 0.0
    return TargetSet(data.x_tgt[idx], cond, slice(k, k + m), k + m)


def sft_targets(data) -> TargetSet:
    if isinstance(data, CarMixture):
        return TargetSet(data.positives, data.condition(len(data.positives)))
    k, m = data.spec.subject_dim, data.spec.context_dim
    idx = data.indices("train")
    return TargetSet(data.x_tgt[idx], data.cond_matrix(idx), slice(k, k + m), k + m)


def car_quads(data: CarMixture) -> QuadSet:
    n = min(len(data.positives), len(data.negatives))
    return QuadSet(data.positives[:n], data.negatives[:n], data.condition(n), ["mixture"] * n)


def with_noop_ref(ckpt: Checkpoint, seed: int) -> Checkpoint:
    """Base checkpoint plus a zero ``ref`` adapter, so the reference equals the base."""
    stack = ckpt.stack.attach("ref", 1, RngStream(seed, tag_of("noop-ref"))).set_enabled({"ref"})
    return Checkpoint(stack, ckpt.layout, ckpt.config, ckpt.iteration, ckpt.rng_state,
                      dict(ckpt.meta, noop_ref=True))


# -- sampling helper -------------------------------------------------------

def sample_checkpoint(ckpt: Checkpoint, cond: np.ndarray, spec: EvalSpec, seed: int, threads: int = 1):
    f = field_of(ckpt)
    x1 = row_noise(RngStream(seed, tag_of("sample")), range(len(cond)), f.data_dim)
    return sample_chunked(f, cond, spec.sampler, x1, spec.chunk_size, threads)


# -- toy cars --------------------------------------------------------------

class CarPipeline:
    """Pretrain on all modes, then supervised vs pairwise adaptation to mode 0."""

    def __init__(self, seed: int, preset: dict | None = None, threads: int = 1, metrics_dir=None):
        self.seed = seed
        self.preset = preset or load_preset("toy-cars")
        self.threads = threads
        self.metrics_dir = Path(metrics_dir) if metrics_dir else None
        self.data = build_dataset("toy-cars", seed, self.preset)
        self.layout = layout_for(self.data)
        self.eval_spec = EvalSpec.from_dict(self.preset["eval"])
        self._base = None

    def _writer(self, name):
        return JsonlWriter(self.metrics_dir / f"{name}.jsonl") if self.metrics_dir else JsonlWriter()

    def ratio(self, stack, n: int | None = None) -> dict:
        spec = self.eval_spec if n is None else EvalSpec.from_dict(dict(self.preset["eval"], n_samples=n))
        f = VelocityField(stack, self.layout)
        return target_mode_ratio(f, self.data.condition(1), self.data.centers, spec, self.seed,
                                 self.threads).to_dict()

    def base(self) -> Checkpoint:
        if self._base is None:
            cfg = stage_config(self.preset, "pretrain", self.seed)
            self._base = pretrain_base(pretrain_targets(self.data), self.layout, cfg, self._writer("pretrain"))
        return self._base

    def _eval_fn(self):
        return lambda stack, it: self.ratio(stack)["target_mode_ratio"]

    def sft(self) -> tuple[Checkpoint, list]:
        cfg = stage_config(self.preset, "sft", self.seed)
        w = self._writer("sft")
        ck = train_sft(self.base(), sft_targets(self.data), cfg, w, self._eval_fn())
        return ck, [(r["iteration"], r["eval"]) for r in w.records if "eval" in r]

    def comparative(self) -> tuple[Checkpoint, list]:
        cfg = stage_config(self.preset, "sfo", self.seed)
        w = self._writer("sfo")
        ck = train_sfo(with_noop_ref(self.base(), self.seed), car_quads(self.data), cfg, w, self._eval_fn())
        return ck, [(r["iteration"], r["eval"]) for r in w.records if "eval" in r]

    def run(self) -> dict:
        base = self.base()
        sft_ck, sft_traj = self.sft()
        cmp_ck, cmp_traj = self.comparative()
        return {
            "base": self.ratio(base.stack),
            "sft": self.ratio(sft_ck.stack), "sft_trajectory": sft_traj,
            "comparative": self.ratio(cmp_ck.stack), "comparative_trajectory": cmp_traj,
        }


def iterations_to_reach(trajectory, level: float):
    """First evaluated iteration whose ratio is at least ``level`` (None if never)."""
    for it, r in trajectory:
        if r >= level:
            return it
    return None


# -- subject world ---------------------------------------------------------

class SubjectPipeline:
    """Staged subject-world pipeline with cached shared artifacts."""

    def __init__(self, seed: int, preset: dict | None = None, threads: int = 1, metrics_dir=None):
        self.seed = seed
        self.preset = preset or load_preset("subject-world")
        self.threads = threads
        self.metrics_dir = Path(metrics_dir) if metrics_dir else None
        self.world: World = build_dataset("subject-world", seed, self.preset)
        self.layout = layout_for(self.world)
        self.eval_spec = EvalSpec.from_dict(self.preset["eval"])
        self._cache: dict = {}

    def _writer(self, name):
        return JsonlWriter(self.metrics_dir / f"{name}.jsonl") if self.metrics_dir else None

    def _cached(self, key, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def base(self) -> Checkpoint:
        return self._cached("base", lambda: pretrain_base(
            pretrain_targets(self.world), self.layout, stage_config(self.preset, "pretrain", self.seed),
            self._writer("pretrain")))

    def sft(self) -> Checkpoint:
        return self._cached("sft", lambda: train_sft(
            self.base(), sft_targets(self.world), stage_config(self.preset, "sft", self.seed),
            self._writer("sft")))

    def synth_config(self, strategy: str, overrides: dict | None = None) -> SynthConfig:
        d = copy.deepcopy(self.preset["synth"])
        d.update(overrides or {})
        d["strategy"] = strategy
        return SynthConfig.from_dict(d)

    def quads(self, strategy: str, overrides: dict | None = None) -> QuadDataset:
        cfg = self.synth_config(strategy, overrides)
        key = ("quads", json.dumps(cfg.to_dict(), sort_keys=True))
        return self._cached(key, lambda: synthesize(self.sft().stack, self.layout, self.world,
                                                    self.world.indices("train"), cfg, self.seed, self.threads))

    def gap_stats(self, strategy: str) -> dict:
        return pair_gap_stats(self.quads(strategy), self.world).to_dict()

    def sfo(self, strategy: str, overrides: dict | None = None, label: str | None = None,
            synth_overrides: dict | None = None) -> Checkpoint:
        cfg = stage_config(self.preset, "sfo", self.seed, overrides)
        key = ("sfo", strategy, json.dumps(cfg.to_dict(), sort_keys=True),
               json.dumps(synth_overrides or {}, sort_keys=True))
        quads = self.quads(strategy, synth_overrides).quadset()
        return self._cached(key, lambda: train_sfo(self.sft(), quads, cfg, self._writer(f"sfo-{label or strategy}")))

    def evaluate(self, ckpt: Checkpoint) -> dict:
        return subject_sweep(field_of(ckpt), self.world, self.eval_spec, self.seed, self.threads)

    def run_row(self, row: dict) -> dict:
        """Driver for :func:`evalkit.run_ablation`.

        ``row`` keys: ``label``, ``kind`` (``sft-base``, ``sft-additional`` or
        ``sfo``), ``strategy``, optional ``sfo`` and ``synth`` overrides.
        """
        kind = row.get("kind", "sfo")
        if kind == "sft-base":
            return self.evaluate(self.sft())
        overrides = dict(row.get("sfo", {}))
        strategy = row.get("strategy", "cdns")
        if kind == "sft-additional":
            overrides["objective"] = "sft"
        elif kind != "sfo":
            raise ValueError(f"unknown ablation row kind {kind!r}")
        ck = self.sfo(strategy, overrides, row["label"], row.get("synth"))
        return self.evaluate(ck)

    def grid(self) -> list[dict]:
        return copy.deepcopy(self.preset["ablation"])
