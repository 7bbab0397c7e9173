"""Typed configuration records and strict JSON loading."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace

from .flow import SamplerConfig
from .schedule import TimestepDist

STAGES = ("pretrain", "sft", "sfo")
STRATEGIES = ("cdns", "selfplay", "dpo_sim", "cdns_img_only", "cdns_text_only")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending field when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


# Per-stage defaults applied before user overrides.
STAGE_DEFAULTS = {
    "pretrain": {"iterations": 3000, "batch_size": 128, "adapter_rank": 0, "optimizer": {"lr": 2e-3}},
    "sft": {"iterations": 1500, "batch_size": 64, "adapter_rank": 4, "optimizer": {"lr": 1e-3}},
    "sfo": {"iterations": 300, "batch_size": 4, "adapter_rank": 16, "optimizer": {"lr": 1e-3}},
}


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "sfo"
    beta: float = 1000.0
    iterations: int = 300
    batch_size: int = 4
    timestep: TimestepDist = field(default_factory=TimestepDist)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    adapter_rank: int = 16
    cond_dropout_p: float = 0.1
    text_dropout_p: float = 0.1
    eval_every: int = 0
    hidden_widths: tuple = (128, 128, 128)
    activation: str = "tanh"
    objective: str = ""
    adapter_name: str = ""
    direct_sfo: bool = False
    allow_mixed_provenance: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}", "stage")
        if not self.beta > 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}", "beta")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}", "iterations")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}", "batch_size")
        if self.stage != "pretrain" and self.adapter_rank < 1:
            raise ConfigError(f"adapter_rank must be >= 1, got {self.adapter_rank}", "adapter_rank")
        for key in ("cond_dropout_p", "text_dropout_p"):
            v = getattr(self, key)
            if not 0 <= v < 1:
                raise ConfigError(f"{key} must be in [0, 1), got {v}", key)
        if self.objective not in ("", "sft", "sfo"):
            raise ConfigError(f"objective must be 'sft' or 'sfo', got {self.objective!r}", "objective")
        if not self.optimizer.lr > 0:
            raise ConfigError(f"optimizer.lr must be > 0, got {self.optimizer.lr}", "optimizer.lr")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def loss_kind(self) -> str:
        """Objective of an adapter-training stage: ``sft`` for pretrain/sft unless overridden."""
        if self.objective:
            return self.objective
        return "sfo" if self.stage == "sfo" else "sft"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["timestep"] = self.timestep.to_dict()
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {key!r}", key)
        stage = d.get("stage", "sfo")
        if stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {stage!r}", "stage")
        merged = _deep_merge(STAGE_DEFAULTS[stage], d)
        try:
            if "timestep" in merged:
                merged["timestep"] = TimestepDist.from_dict(merged["timestep"])
            if "optimizer" in merged:
                opt = merged["optimizer"]
                bad = set(opt) - {f.name for f in fields(OptimizerConfig)}
                if bad:
                    key = sorted(bad)[0]
                    raise ConfigError(f"unknown config key 'optimizer.{key}'", f"optimizer.{key}")
                merged["optimizer"] = OptimizerConfig(**{k: float(v) for k, v in opt.items()})
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc), "timestep") from exc
        return cls(**merged)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        d = {"stage": stage}
        for k, v in overrides.items():
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif isinstance(v, OptimizerConfig):
                v = asdict(v)
            d[k] = v
        return cls.from_dict(d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class SynthConfig:
    strategy: str = "cdns"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    n_per_triplet: int = 1
    leak: float = 0.5
    filter_max_similarity: float | None = None
    chunk_size: int = 64

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}", "strategy")
        if self.n_per_triplet < 1:
            raise ConfigError("n_per_triplet must be >= 1", "n_per_triplet")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1", "chunk_size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {key!r}", key)
        if "sampler" in d:
            d["sampler"] = _sampler(d["sampler"])
        return cls(**d)


@dataclass(frozen=True)
class EvalSpec:
    n_samples: int = 16
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    held_out_subject_ids: tuple = ()
    report_path: str = ""
    chunk_size: int = 256

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1", "n_samples")
        object.__setattr__(self, "held_out_subject_ids", tuple(int(i) for i in self.held_out_subject_ids))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampler"] = self.sampler.to_dict()
        d["held_out_subject_ids"] = list(self.held_out_subject_ids)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSpec":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {key!r}", key)
        if "sampler" in d:
            d["sampler"] = _sampler(d["sampler"])
        return cls(**d)


def _sampler(d: dict) -> SamplerConfig:
    try:
        return SamplerConfig.from_dict(d)
    except ValueError as exc:
        raise ConfigError(str(exc), "sampler") from exc


def _deep_merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


KINDS = {"train": TrainConfig, "synth": SynthConfig, "eval": EvalSpec}


def parse_config(text: str, kind: str = "train"):
    """Parse a JSON config string strictly into the record for ``kind``."""
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    try:
        return KINDS[kind].from_dict(data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, kind: str = "train"):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), kind)


def dump_config(cfg) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def config_schema() -> dict:
    """Defaults of every config kind, as emitted by ``config-schema``."""
    return {
        "train": {stage: TrainConfig.for_stage(stage).to_dict() for stage in STAGES},
        "synth": SynthConfig().to_dict(),
        "eval": EvalSpec().to_dict(),
    }
