"""Evaluation: target-mode ratio, held-out subject sweeps and ablation tables."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import EvalSpec
from .flow import row_noise, sample_chunked
from .model import FieldLayout, VelocityField
from .numcore import RngStream, tag_of
from .world import World, alignment_oracle, fidelity_oracle, mode_classifier

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CSV_HEADERS = ("label", "status", "fidelity_mean", "fidelity_std", "alignment_mean", "alignment_std",
               "target_mode_ratio", "n_samples", "error")


@dataclass
class ModeRatio:
    ratio: float
    counts: list
    n: int

    def to_dict(self) -> dict:
        return {"target_mode_ratio": self.ratio, "mode_counts": self.counts, "n_samples": self.n}


def mode_ratio_from_samples(x: np.ndarray, centers: np.ndarray) -> ModeRatio:
    modes = mode_classifier(np.atleast_2d(x), centers)
    counts = np.bincount(modes, minlength=len(centers))
    return ModeRatio(float(counts[0]) / len(modes), counts.tolist(), int(len(modes)))


def target_mode_ratio(model, condition, centers, spec: EvalSpec, seed: int, threads: int = 1) -> ModeRatio:
    """Fraction of ``spec.n_samples`` generations that land in mode 0.

    ``model`` is any velocity field exposing ``data_dim`` (and ``null_condition``
    when guidance is used).
    """
    n = spec.n_samples
    cond = np.broadcast_to(np.atleast_2d(condition), (n, np.atleast_2d(condition).shape[1]))
    x1 = row_noise(RngStream(seed, tag_of("eval:mode")), range(n), model.data_dim)
    x = sample_chunked(model, cond, spec.sampler, x1, spec.chunk_size, threads)
    return mode_ratio_from_samples(x, centers)


def heldout_records(world: World, held_out_ids) -> np.ndarray:
    ids = np.asarray(sorted(held_out_ids) if len(held_out_ids) else world.heldout, dtype=np.int64)
    overlap = np.intersect1d(ids, world.train_subjects)
    if overlap.size:
        raise ValueError(f"held-out subjects overlap the training split: {overlap.tolist()}")
    return np.flatnonzero(np.isin(world.subject_id, ids))


def subject_sweep(model, world: World, spec: EvalSpec, seed: int, threads: int = 1,
                  return_samples: bool = False) -> dict:
    """Generate ``n_samples`` per held-out (subject, context) record and score them."""
    recs = heldout_records(world, spec.held_out_subject_ids)
    n = spec.n_samples
    rows = np.repeat(recs, n)
    draws = np.tile(np.arange(n), len(recs))
    x1 = row_noise(RngStream(seed, tag_of("eval:sweep")), zip(rows, draws), world.spec.data_dim)
    x = sample_chunked(model, world.cond_matrix(rows), spec.sampler, x1, spec.chunk_size, threads)
    fid = fidelity_oracle(x, world.subject_id[rows], world)
    ali = alignment_oracle(x, rows, world)
    out = {
        "fidelity_mean": float(np.mean(fid)), "fidelity_std": float(np.std(fid)),
        "alignment_mean": float(np.mean(ali)), "alignment_std": float(np.std(ali)),
        "n_samples": int(len(rows)), "n_conditions": int(len(recs)),
    }
    if return_samples:
        out["samples"] = x
        out["record_index"] = rows
    return out


def field_of(ckpt, enabled=None) -> VelocityField:
    return VelocityField(ckpt.stack, ckpt.layout, enabled)


# -- tables ----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return format(v, ".10f")
    return str(v)


@dataclass
class AblationRow:
    label: str
    status: str = "ok"
    fidelity_mean: float | None = None
    fidelity_std: float | None = None
    alignment_mean: float | None = None
    alignment_std: float | None = None
    target_mode_ratio: float | None = None
    n_samples: int | None = None
    error: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {h: getattr(self, h) for h in CSV_HEADERS}
        d["extra"] = self.extra
        return d


class AblationTable:
    def __init__(self, rows=()):
        self.rows: list[AblationRow] = []
        for r in rows:
            self.add(r)

    def add(self, row: AblationRow) -> None:
        if any(r.label == row.label for r in self.rows):
            raise ValueError(f"duplicate row label {row.label!r}")
        self.rows.append(row)

    def __getitem__(self, label: str) -> AblationRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def labels(self) -> list[str]:
        return [r.label for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADERS)
        for r in self.rows:
            w.writerow([_fmt(getattr(r, h)) for h in CSV_HEADERS])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"schema_version": REPORT_SCHEMA_VERSION, "headers": list(CSV_HEADERS),
               "rows": [r.to_dict() for r in self.rows]}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        reader = csv.reader(io.StringIO(text))
        headers = next(reader)
        if tuple(headers) != CSV_HEADERS:
            raise ValueError(f"unexpected report headers {headers}")
        rows = []
        for vals in reader:
            d = dict(zip(headers, vals))
            kw = {"label": d["label"], "status": d["status"], "error": d["error"]}
            for h in ("fidelity_mean", "fidelity_std", "alignment_mean", "alignment_std", "target_mode_ratio"):
                kw[h] = float(d[h]) if d[h] else None
            kw["n_samples"] = int(d["n_samples"]) if d["n_samples"] else None
            rows.append(AblationRow(**kw))
        return cls(rows)


def run_ablation(grid, driver) -> AblationTable:
    """Evaluate every row of ``grid`` with ``driver(row) -> dict``.

    ``grid`` is a sequence of dicts each holding a unique ``label``. A failing
    row is recorded with status ``failed`` and the table is still produced.
    The driver is expected to cache artifacts shared between rows.
    """
    table = AblationTable()
    for row in grid:
        label = row["label"]
        try:
            res = dict(driver(row))
            known = {k: res.pop(k) for k in list(res) if k in CSV_HEADERS and k not in ("label", "status")}
            table.add(AblationRow(label=label, extra=res, **known))
        except Exception as exc:  # row failures are data, not crashes
            log.warning("ablation row %s failed: %s", label, exc)
            table.add(AblationRow(label=label, status="failed", error=f"{type(exc).__name__}: {exc}"))
    return table


def layout_check(layout: FieldLayout, world: World) -> None:
    if layout.data_dim != world.spec.data_dim or layout.cond_dim != world.spec.cond_dim:
        raise ValueError("checkpoint layout does not match the world dimensions")
