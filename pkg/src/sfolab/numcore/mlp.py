"""Feed-forward MLPs with exact reverse-mode parameter gradients."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .rng import RngStream


class ShapeError(ValueError):
    """Raised when array shapes disagree with a network spec."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or inf."""


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple[int, ...]
    output_dim: int
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.activation not in ("tanh", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.hidden_widths:
            raise ValueError("MlpSpec needs at least one hidden layer")
        if min(self.input_dim, self.output_dim, *self.hidden_widths) < 1:
            raise ValueError("all MlpSpec dims must be >= 1")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """``(out, in)`` per linear layer."""
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def n_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_widths": list(self.hidden_widths),
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden_widths"]), int(d["output_dim"]), d["activation"])


@dataclass
class ParamSet:
    """Per-layer weights ``(out, in)`` and biases ``(out,)``, indexed by layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def copy(self) -> "ParamSet":
        return ParamSet([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check(self, spec: MlpSpec) -> None:
        if len(self.weights) != spec.n_layers or len(self.biases) != spec.n_layers:
            raise ShapeError(f"expected {spec.n_layers} layers, got {len(self.weights)}")
        for k, ((o, i), w, b) in enumerate(zip(spec.layer_shapes, self.weights, self.biases)):
            if w.shape != (o, i) or b.shape != (o,):
                raise ShapeError(f"layer {k}: expected W{(o, i)} b{(o,)}, got W{w.shape} b{b.shape}")

    def named(self, prefix: str = "base") -> dict[str, np.ndarray]:
        out = {}
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.W.{k}"] = w
            out[f"{prefix}.b.{k}"] = b
        return out

    def to_bytes(self) -> bytes:
        blob = {
            "shapes": [list(w.shape) for w in self.weights],
            "data": base64.b64encode(pack_arrays(self.weights + self.biases)).decode(),
        }
        return json.dumps(blob, sort_keys=True).encode()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ParamSet":
        blob = json.loads(raw)
        shapes = [tuple(s) for s in blob["shapes"]]
        arrays = unpack_arrays(base64.b64decode(blob["data"]), shapes + [(s[0],) for s in shapes])
        n = len(shapes)
        return cls(arrays[:n], arrays[n:])


def pack_arrays(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def unpack_arrays(raw: bytes, shapes) -> list[np.ndarray]:
    flat = np.frombuffer(raw, dtype="<f8")
    need = sum(int(np.prod(s)) for s in shapes)
    if flat.size != need:
        raise ShapeError(f"expected {need} values, found {flat.size}")
    out, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        out.append(flat[pos:pos + size].astype(np.float64).reshape(s))
        pos += size
    return out


def init_params(spec: MlpSpec, rng: RngStream, out_scale: float = 1.0) -> ParamSet:
    """LeCun-normal weights, zero biases. ``out_scale`` shrinks the last layer."""
    weights, biases = [], []
    for k, (o, i) in enumerate(spec.layer_shapes):
        w = rng.normal((o, i)) / np.sqrt(i)
        if k == spec.n_layers - 1:
            w *= out_scale
        weights.append(w)
        biases.append(np.zeros(o))
    return ParamSet(weights, biases)


def zeros_like(params: ParamSet) -> ParamSet:
    return ParamSet([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    dacts: list[np.ndarray] = field(default_factory=list)


def _as_matrix(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D input, got shape {x.shape}")
    return x


def mlp_forward(params: ParamSet, spec: MlpSpec, x, cache: ForwardCache | None = None) -> np.ndarray:
    x = _as_matrix(x)
    if x.shape[1] != spec.input_dim:
        raise ShapeError(f"layer 0: input has {x.shape[1]} columns, spec expects {spec.input_dim}")
    act = backend.ACT_CODES[spec.activation]
    h = x
    last = spec.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        if w.shape[1] != h.shape[1]:
            raise ShapeError(f"layer {k}: weight expects {w.shape[1]} inputs, got {h.shape[1]}")
        w = np.ascontiguousarray(w)
        b = np.ascontiguousarray(b)
        out, dact = backend.dense_forward(h, w, b, 0 if k == last else act)
        if cache is not None:
            cache.inputs.append(h)
            cache.dacts.append(dact)
        h = out
    return h


def mlp_backward(params: ParamSet, spec: MlpSpec, x, upstream_grad, cache: ForwardCache | None = None):
    """Gradients of ``<upstream_grad, mlp_forward(x)>`` w.r.t. parameters and input."""
    x = _as_matrix(x)
    if cache is None:
        cache = ForwardCache()
        out = mlp_forward(params, spec, x, cache)
    else:
        out = None
    g = _as_matrix(upstream_grad)
    expect = (x.shape[0], spec.output_dim)
    if g.shape != expect or (out is not None and out.shape != g.shape):
        raise ShapeError(f"upstream_grad shape {g.shape} != output shape {expect}")
    gw = [None] * spec.n_layers
    gb = [None] * spec.n_layers
    for k in range(spec.n_layers - 1, -1, -1):
        w = np.ascontiguousarray(params.weights[k])
        gw[k], gb[k], g = backend.dense_backward(cache.inputs[k], w, cache.dacts[k], g)
    return ParamSet(gw, gb), g
