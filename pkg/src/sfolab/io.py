"""On-disk formats: checkpoints, array datasets, JSONL metrics, manifests.

Checkpoint (JSON, ``format = "sfolab-checkpoint"``, ``version = 1``)::

    {"format", "version", "content_hash", "payload": {
        "mlp_spec", "layout", "base": {"shapes", "data"},
        "adapters": [{"name", "rank", "scale", "A": {...}, "B": {...}}],
        "enabled", "scale_convention", "config", "iteration", "rng_state", "meta"}}

Arrays are little-endian float64 bytes, base64 encoded. ``content_hash`` is the
SHA-256 of the canonical (sorted-key, compact) JSON of ``payload``.

Datasets are directories holding ``manifest.json`` plus one ``.npy`` per array;
``np.save`` output is byte-stable, unlike zip archives.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapters import SCALE_CONVENTION, AdapterStack, LowRankAdapter
from .model import FieldLayout
from .numcore import MlpSpec, ParamSet
from .numcore.mlp import pack_arrays, unpack_arrays

CHECKPOINT_FORMAT = "sfolab-checkpoint"
CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_tree(path) -> str:
    """Hash of a file, or of every file under a directory (names included)."""
    p = Path(path)
    if p.is_file():
        return sha256_file(p)
    h = hashlib.sha256()
    for f in sorted(q for q in p.rglob("*") if q.is_file()):
        h.update(str(f.relative_to(p)).encode())
        h.update(sha256_file(f).encode())
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _enc(arrays) -> dict:
    return {"shapes": [list(a.shape) for a in arrays],
            "data": base64.b64encode(pack_arrays(arrays)).decode()}


def _dec(blob) -> list[np.ndarray]:
    shapes = [tuple(s) for s in blob["shapes"]]
    return unpack_arrays(base64.b64decode(blob["data"]), shapes)


@dataclass
class Checkpoint:
    stack: AdapterStack
    layout: FieldLayout
    config: dict = field(default_factory=dict)
    iteration: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def payload(self) -> dict:
        s = self.stack
        return {
            "mlp_spec": s.spec.to_dict(),
            "layout": self.layout.to_dict(),
            "base": _enc(s.base.weights + s.base.biases),
            "adapters": [
                {"name": ad.name, "rank": ad.rank, "scale": ad.scale, "A": _enc(ad.A), "B": _enc(ad.B)}
                for ad in s.adapters.values()
            ],
            "enabled": sorted(s.enabled),
            "scale_convention": SCALE_CONVENTION,
            "config": self.config,
            "iteration": self.iteration,
            "rng_state": self.rng_state,
            "meta": self.meta,
        }

    def content_hash(self) -> str:
        return sha256_bytes(canonical_json(self.payload()).encode())

    @classmethod
    def from_payload(cls, p: dict) -> "Checkpoint":
        spec = MlpSpec.from_dict(p["mlp_spec"])
        arrays = _dec(p["base"])
        n = spec.n_layers
        base = ParamSet(arrays[:n], arrays[n:])
        adapters = {}
        for a in p["adapters"]:
            adapters[a["name"]] = LowRankAdapter(a["name"], int(a["rank"]), _dec(a["A"]), _dec(a["B"]),
                                                 float(a["scale"]))
        stack = AdapterStack(spec, base, adapters, frozenset(p["enabled"]))
        return cls(stack, FieldLayout.from_dict(p["layout"]), p.get("config", {}), int(p.get("iteration", 0)),
                   p.get("rng_state", {}), p.get("meta", {}))


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    payload = ckpt.payload()
    digest = sha256_bytes(canonical_json(payload).encode())
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "content_hash": digest, "payload": payload}
    atomic_write_text(path, canonical_json(doc) + "\n")
    return digest


def load_checkpoint(path) -> Checkpoint:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not an sfolab checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    payload = doc.get("payload")
    if sha256_bytes(canonical_json(payload).encode()) != doc.get("content_hash"):
        raise CheckpointError(f"{path}: content hash mismatch")
    try:
        return Checkpoint.from_payload(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint payload ({exc})") from exc


def save_arrays(directory, arrays: dict[str, np.ndarray], manifest: dict) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in sorted(arrays):
        with open(d / f"{name}.npy", "wb") as fh:
            np.save(fh, np.ascontiguousarray(arrays[name]), allow_pickle=False)
    man = dict(manifest)
    man["arrays"] = sorted(arrays)
    man.setdefault("version", DATASET_VERSION)
    atomic_write_text(d / "manifest.json", json.dumps(man, indent=2, sort_keys=True) + "\n")


def load_arrays(directory) -> tuple[dict, dict[str, np.ndarray]]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"{d}: dataset version {manifest.get('version')} != {DATASET_VERSION}")
    arrays = {name: np.load(d / f"{name}.npy", allow_pickle=False) for name in manifest["arrays"]}
    return manifest, arrays


class JsonlWriter:
    """Append-only JSONL sink; rejects non-increasing iterations."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._last = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def write(self, record: dict) -> None:
        it = record.get("iteration")
        if it is not None and self._last is not None and it <= self._last:
            raise ValueError(f"iteration {it} is not after {self._last}")
        self._last = it if it is not None else self._last
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
