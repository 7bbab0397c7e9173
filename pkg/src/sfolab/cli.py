"""Command-line entry point: ``sfo-lab <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Diagnostics go to standard error; results are written only to the named
output paths. Every command that writes outputs also writes a run manifest
(config hash, input hashes, outputs, wall time) next to its main output.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import ConfigError, EvalSpec, SynthConfig, TrainConfig, config_schema, parse_config
from .evalkit import AblationRow, AblationTable, field_of, run_ablation, subject_sweep, target_mode_ratio
from .io import CheckpointError, JsonlWriter, atomic_write_text, load_checkpoint, save_checkpoint, sha256_bytes
from .io import sha256_tree
from .negatives import load_quads, pair_gap_stats, save_quads, synthesize
from .numcore import NonFiniteError
from .pipeline import (
    PRESET_NAMES,
    CarPipeline,
    SubjectPipeline,
    build_dataset,
    car_quads,
    iterations_to_reach,
    layout_for,
    load_dataset,
    load_preset,
    pretrain_targets,
    sample_checkpoint,
    save_dataset,
    sft_targets,
    with_noop_ref,
)
from .trainer import TrainingDiverged, pretrain_base, train_sfo, train_sft
from .world import CarMixture

log = logging.getLogger("sfolab")

STRATEGY_FLAGS = {"cdns": "cdns", "selfplay": "selfplay", "dpo-sim": "dpo_sim", "cdns-img-only": "cdns_img_only",
                  "cdns-text-only": "cdns_text_only"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _threads(value) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return n


def default_threads() -> int:
    env = os.environ.get("SFO_LAB_THREADS")
    if not env:
        return 1
    try:
        return _threads(env)
    except (ValueError, argparse.ArgumentTypeError):
        raise UsageError(f"SFO_LAB_THREADS must be a positive integer, got {env!r}")


# -- run manifest ----------------------------------------------------------

class RunManifest:
    def __init__(self, command: str, args: argparse.Namespace):
        self.command = command
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config_hash = None
        self.start = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = sha256_tree(path)

    def add_output(self, path) -> None:
        self.outputs.append(str(path))

    def write(self, path) -> None:
        doc = {
            "command": self.command,
            "artifact_version": __version__,
            "seed": getattr(self.args, "seed", None),
            "threads": getattr(self.args, "threads", None),
            "config_hash": self.config_hash,
            "input_hashes": self.inputs,
            "outputs": self.outputs,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def manifest_path(out) -> Path:
    """Sibling ``<out>.manifest.json``; never inside an output directory, so
    directory hashes stay independent of wall time."""
    p = Path(out)
    return p.with_name(p.name + ".manifest.json")


# -- config loading --------------------------------------------------------

def _merged_config(base: dict, path, kind: str, man: RunManifest):
    """Preset section updated with the user's JSON file (strictly validated)."""
    d = dict(base)
    if path:
        text = Path(path).read_text(encoding="utf-8")
        man.config_hash = sha256_bytes(text.encode())
        parse_config(text, kind)  # validates keys and reports line/column
        user = json.loads(text) if text.strip() else {}
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k] = {**d[k], **v}
            else:
                d[k] = v
    return parse_config(json.dumps(d), kind)


def _train_config(preset: dict, section: str, args, man) -> TrainConfig:
    cfg = _merged_config(preset[section], args.config, "train", man)
    return cfg.replace(seed=args.seed)


def _dataset(args, man):
    man.add_input(args.data)
    return load_dataset(args.data)


def _write_metrics(args):
    return JsonlWriter(args.metrics) if args.metrics else None


# -- commands --------------------------------------------------------------

def cmd_gen_data(args, man):
    preset = load_preset(args.preset)
    data = build_dataset(args.preset, args.seed, preset)
    save_dataset(args.out, data, args.preset, preset, args.seed)
    man.add_output(args.out)
    return Path(args.out)


def cmd_pretrain(args, man):
    dman, data = _dataset(args, man)
    cfg = _train_config(dman["preset_config"], "pretrain", args, man)
    ckpt = pretrain_base(pretrain_targets(data), layout_for(data), cfg, _write_metrics(args))
    save_checkpoint(ckpt, args.out)
    man.add_output(args.out)
    return Path(args.out)


def cmd_train_sft(args, man):
    dman, data = _dataset(args, man)
    man.add_input(args.checkpoint)
    base = load_checkpoint(args.checkpoint)
    cfg = _train_config(dman["preset_config"], "sft", args, man)
    ckpt = train_sft(base, sft_targets(data), cfg, _write_metrics(args))
    save_checkpoint(ckpt, args.out)
    man.add_output(args.out)
    return Path(args.out)


def cmd_synth(args, man):
    dman, data = _dataset(argparse.Namespace(data=args.inp), man)
    if isinstance(data, CarMixture):
        raise UsageError("synth-negatives needs a subject-world dataset (toy-cars uses its mixture negatives)")
    man.add_input(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    base = dict(dman["preset_config"]["synth"])
    for key, flag in (("leak", args.leak), ("n_per_triplet", args.n_per_triplet), ("chunk_size", args.chunk_size)):
        if flag is not None:
            base[key] = flag
    sampler = dict(base.get("sampler", {}))
    if args.steps is not None:
        sampler["steps"] = args.steps
    if args.guidance is not None:
        sampler["guidance_scale"] = args.guidance
    base["sampler"] = sampler
    base["strategy"] = STRATEGY_FLAGS[args.strategy]
    cfg = _merged_config(base, args.config, "synth", man)
    cfg = SynthConfig.from_dict(dict(cfg.to_dict(), strategy=STRATEGY_FLAGS[args.strategy]))
    quads = synthesize(ckpt.stack, ckpt.layout, data, data.indices("train"), cfg, args.seed, args.threads)
    save_quads(args.out, quads, {"synth_config": cfg.to_dict(), "seed": args.seed,
                                 "checkpoint_hash": ckpt.content_hash()})
    stats_path = Path(str(Path(args.out)) + ".gapstats.json")
    atomic_write_text(stats_path, json.dumps(pair_gap_stats(quads, data).to_dict(), indent=2, sort_keys=True)
                      + "\n")
    man.add_output(args.out)
    man.add_output(stats_path)
    return Path(args.out)


def cmd_train_sfo(args, man):
    man.add_input(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    man.add_input(args.quads)
    qpath = Path(args.quads)
    qman = json.loads((qpath / "manifest.json").read_text(encoding="utf-8"))
    if qman.get("kind") == "toy-cars":
        _, data = load_dataset(qpath)
        quads = car_quads(data)
        preset = qman["preset_config"]
        if "ref" not in ckpt.stack.adapters:
            ckpt = with_noop_ref(ckpt, args.seed)
    elif qman.get("kind") == "quadruplets":
        _, qd = load_quads(qpath)
        quads = qd.quadset()
        preset = load_preset("subject-world") if args.data is None else load_dataset(args.data)[0]["preset_config"]
    else:
        raise UsageError(f"{qpath}: expected a quadruplet directory or a toy-cars dataset")
    cfg = _train_config(preset, "sfo", args, man)
    out = train_sfo(ckpt, quads, cfg, _write_metrics(args))
    save_checkpoint(out, args.out)
    man.add_output(args.out)
    return Path(args.out)


def _eval_spec(preset: dict, args, man) -> EvalSpec:
    base = dict(preset["eval"])
    if getattr(args, "n", None) is not None:
        base["n_samples"] = args.n
    sampler = dict(base.get("sampler", {}))
    if getattr(args, "steps", None) is not None:
        sampler["steps"] = args.steps
    if getattr(args, "guidance", None) is not None:
        sampler["guidance_scale"] = args.guidance
    base["sampler"] = sampler
    return _merged_config(base, getattr(args, "config", None), "eval", man)


def cmd_sample(args, man):
    dman, data = _dataset(args, man)
    man.add_input(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    spec = _eval_spec(dman["preset_config"], args, man)
    if isinstance(data, CarMixture):
        cond = data.condition(spec.n_samples)
        rows = np.zeros(spec.n_samples, dtype=np.int64)
    else:
        recs = data.indices(args.split)
        rows = np.repeat(recs, spec.n_samples)
        cond = data.cond_matrix(rows)
    x = sample_checkpoint(ckpt, cond, spec, args.seed, args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.save(fh, x, allow_pickle=False)
    man.add_output(out)
    return out


def _evaluate(ckpt, data, spec, seed, threads) -> dict:
    if isinstance(data, CarMixture):
        return target_mode_ratio(field_of(ckpt), data.condition(1), data.centers, spec, seed, threads).to_dict()
    return subject_sweep(field_of(ckpt), data, spec, seed, threads)


def cmd_eval(args, man):
    dman, data = _dataset(args, man)
    man.add_input(args.checkpoint)
    ckpt = load_checkpoint(args.checkpoint)
    spec = _eval_spec(dman["preset_config"], args, man)
    res = _evaluate(ckpt, data, spec, args.seed, args.threads)
    res = {"label": args.label or Path(args.checkpoint).stem, "checkpoint_hash": ckpt.content_hash(), **res}
    atomic_write_text(args.out, json.dumps(res, indent=2, sort_keys=True) + "\n")
    man.add_output(args.out)
    return Path(args.out)


def _write_table(table: AblationTable, out: Path, man) -> None:
    atomic_write_text(out / "report.csv", table.to_csv())
    atomic_write_text(out / "report.json", table.to_json())
    man.add_output(out / "report.csv")
    man.add_output(out / "report.json")


def cmd_report(args, man):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.evals:
        table = AblationTable()
        for path in args.evals:
            man.add_input(path)
            d = json.loads(Path(path).read_text(encoding="utf-8"))
            fields = {k: d.get(k) for k in ("fidelity_mean", "fidelity_std", "alignment_mean", "alignment_std",
                                            "target_mode_ratio", "n_samples")}
            table.add(AblationRow(label=d.get("label", Path(path).stem), **fields))
        _write_table(table, out, man)
        return out
    if args.preset is None or args.seed is None:
        raise UsageError("report needs either --evals FILES or --preset NAME --seed N")
    preset = load_preset(args.preset)
    if args.config:
        preset = _merged_preset(preset, args.config, man)
    metrics_dir = out / "metrics"
    if args.preset == "toy-cars":
        pipe = CarPipeline(args.seed, preset, args.threads, metrics_dir)
        res = pipe.run()
        table = AblationTable()
        for label in ("base", "sft", "comparative"):
            r = res[label]
            table.add(AblationRow(label=label, target_mode_ratio=r["target_mode_ratio"], n_samples=r["n_samples"],
                                  extra={"mode_counts": r["mode_counts"]}))
        sft_final = res["sft"]["target_mode_ratio"]
        summary = {
            "sft_trajectory": res["sft_trajectory"], "comparative_trajectory": res["comparative_trajectory"],
            "comparative_reaches_sft_final_at": iterations_to_reach(res["comparative_trajectory"], sft_final),
        }
        atomic_write_text(out / "trajectories.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
        man.add_output(out / "trajectories.json")
    else:
        pipe = SubjectPipeline(args.seed, preset, args.threads, metrics_dir)
        table = run_ablation(pipe.grid(), pipe.run_row)
        gaps = {s: pipe.gap_stats(s) for s in ("cdns", "selfplay", "dpo_sim")}
        atomic_write_text(out / "gap_stats.json", json.dumps(gaps, indent=2, sort_keys=True) + "\n")
        man.add_output(out / "gap_stats.json")
    _write_table(table, out, man)
    man.add_output(metrics_dir)
    return out


def _merged_preset(preset: dict, path, man) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    man.config_hash = sha256_bytes(text.encode())
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    unknown = set(user) - set(preset)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(f"unknown preset key {key!r}", key)
    out = dict(preset)
    for k, v in user.items():
        out[k] = {**out[k], **v} if isinstance(v, dict) and isinstance(out[k], dict) else v
    return out


def cmd_config_schema(args, man):
    text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
        return Path(args.out)
    sys.stdout.write(text)
    return None


# -- parser ----------------------------------------------------------------

def _schema_epilog() -> str:
    lines = ["config defaults (per stage):"]
    for stage, d in config_schema()["train"].items():
        lines.append(f"  {stage}: " + ", ".join(f"{k}={d[k]}" for k in ("iterations", "batch_size", "adapter_rank",
                                                                       "beta")))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sfo-lab", description="Staged flow-matching fine-tuning lab.",
                epilog=_schema_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_, stochastic=True):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.set_defaults(func=func)
        if stochastic:
            sp.add_argument("--seed", type=int, required=True, help="root seed (required)")
        sp.add_argument("--threads", type=_threads, default=None,
                        help="worker threads (default: $SFO_LAB_THREADS or 1)")
        return sp

    g = add("gen-data", cmd_gen_data, "generate a dataset directory from a preset")
    g.add_argument("--preset", required=True, choices=PRESET_NAMES)
    g.add_argument("--out", required=True)

    for name, func, help_, ckpt in (("pretrain", cmd_pretrain, "train the base model", False),
                                    ("train-sft", cmd_train_sft, "train the supervised 'ref' adapter", True)):
        s = add(name, func, help_)
        s.add_argument("--data", required=True, help="dataset directory from gen-data")
        if ckpt:
            s.add_argument("--checkpoint", required=True)
        s.add_argument("--config", help="JSON train config overriding the preset stage")
        s.add_argument("--out", required=True, help="output checkpoint path")
        s.add_argument("--metrics", help="JSONL metrics path")

    s = add("synth-negatives", cmd_synth, "synthesize negative targets into a quadruplet directory")
    s.add_argument("--strategy", required=True, choices=sorted(STRATEGY_FLAGS))
    s.add_argument("--checkpoint", required=True, help="SFT checkpoint with a 'ref' adapter")
    s.add_argument("--in", dest="inp", required=True, help="subject-world dataset directory")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON synth config")
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance", type=float)
    s.add_argument("--leak", type=float)
    s.add_argument("--n-per-triplet", type=int)
    s.add_argument("--chunk-size", type=int)

    s = add("train-sfo", cmd_train_sfo, "pairwise fine-tuning of an 'sfo' adapter")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--quads", required=True, help="quadruplet directory (or a toy-cars dataset)")
    s.add_argument("--data", help="dataset directory whose preset supplies defaults")
    s.add_argument("--config", help="JSON train config overriding the preset stage")
    s.add_argument("--out", required=True)
    s.add_argument("--metrics")

    for name, func, help_ in (("sample", cmd_sample, "draw samples to a .npy file"),
                              ("eval", cmd_eval, "evaluate a checkpoint into a JSON summary")):
        s = add(name, func, help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        s.add_argument("--config", help="JSON eval spec")
        s.add_argument("--n", type=int, help="samples per condition")
        s.add_argument("--steps", type=int)
        s.add_argument("--guidance", type=float)
        if name == "sample":
            s.add_argument("--split", default="heldout", choices=("train", "heldout", "all"))
        else:
            s.add_argument("--label")

    s = add("report", cmd_report, "build a report table from evals or by running a preset pipeline",
            stochastic=False)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--evals", nargs="+", help="eval JSON files to tabulate")
    s.add_argument("--preset", choices=PRESET_NAMES, help="run the full pipeline of a preset")
    s.add_argument("--seed", type=int, help="root seed (required with --preset)")
    s.add_argument("--config", help="JSON overrides of preset sections")

    s = add("config-schema", cmd_config_schema, "print every config kind with its defaults", stochastic=False)
    s.add_argument("--out")
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("sfo-lab: error: a command is required")
        if args.threads is None:
            args.threads = default_threads()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    man = RunManifest(args.command, args)
    try:
        with threadpool_limits(limits=1):
            out = args.func(args, man)
        if out is not None:
            man.write(manifest_path(out))
    except (UsageError, ConfigError) as exc:
        key = f" [key: {exc.key}]" if getattr(exc, "key", None) else ""
        print(f"sfo-lab {args.command}: {exc}{key}", file=sys.stderr)
        return 1
    except (CheckpointError, TrainingDiverged, NonFiniteError, ValueError, OSError, KeyError) as exc:
        print(f"sfo-lab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
