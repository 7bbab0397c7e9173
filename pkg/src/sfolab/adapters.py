"""Named low-rank adapters over every linear layer of a base MLP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import ForwardCache, MlpSpec, ParamSet, RngStream, mlp_backward, mlp_forward, tag_of

SCALE_CONVENTION = "1/rank"


@dataclass
class LowRankAdapter:
    name: str
    rank: int
    A: list[np.ndarray]  # (rank, in) per layer
    B: list[np.ndarray]  # (out, rank) per layer
    scale: float

    def delta(self, layer: int) -> np.ndarray:
        return self.scale * (self.B[layer] @ self.A[layer])


@dataclass
class AdapterStack:
    """Base parameters plus an ordered set of adapters and the enabled subset.

    Stacks behave as values: ``attach``, ``set_enabled`` and ``with_params``
    return new stacks and never write into shared arrays.
    """

    spec: MlpSpec
    base: ParamSet
    adapters: dict[str, LowRankAdapter] = field(default_factory=dict)
    enabled: frozenset = frozenset()
    _eff_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.enabled = frozenset(self.enabled)
        self.base.check(self.spec)

    @property
    def names(self) -> list[str]:
        return list(self.adapters)

    def _replace(self, **kw) -> "AdapterStack":
        d = {"spec": self.spec, "base": self.base, "adapters": dict(self.adapters), "enabled": self.enabled}
        d.update(kw)
        return AdapterStack(**d)

    def attach(self, name: str, rank: int, rng: RngStream, enable: bool = True) -> "AdapterStack":
        """Add a fresh adapter: ``A ~ N(0, 1/rank)``, ``B = 0``, scale ``1/rank``."""
        if name in self.adapters:
            raise ValueError(f"adapter {name!r} already attached")
        if rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {rank}")
        r = rng.split(tag_of(f"adapter:{name}"))
        A = [r.normal((rank, i)) / np.sqrt(rank) for (_, i) in self.spec.layer_shapes]
        B = [np.zeros((o, rank)) for (o, _) in self.spec.layer_shapes]
        adapters = dict(self.adapters)
        adapters[name] = LowRankAdapter(name, rank, A, B, 1.0 / rank)
        enabled = self.enabled | {name} if enable else self.enabled
        return self._replace(adapters=adapters, enabled=enabled)

    def set_enabled(self, names) -> "AdapterStack":
        names = frozenset(names)
        unknown = names - set(self.adapters)
        if unknown:
            raise KeyError(f"unknown adapters: {sorted(unknown)}")
        return self._replace(enabled=names)

    def effective_params(self, enabled=None) -> ParamSet:
        enabled = self.enabled if enabled is None else frozenset(enabled)
        unknown = enabled - set(self.adapters)
        if unknown:
            raise KeyError(f"unknown adapters: {sorted(unknown)}")
        if enabled in self._eff_cache:
            return self._eff_cache[enabled]
        weights = []
        for k, w in enumerate(self.base.weights):
            w_eff = w
            for name, ad in self.adapters.items():
                if name in enabled:
                    w_eff = w_eff + ad.delta(k)
            weights.append(w_eff)
        eff = ParamSet(weights, list(self.base.biases))
        self._eff_cache[enabled] = eff
        return eff

    def forward(self, x, enabled=None) -> np.ndarray:
        return mlp_forward(self.effective_params(enabled), self.spec, x)

    def backward(self, x, upstream, enabled=None, trainable=None):
        """Gradients of ``<upstream, forward(x)>`` for named parameters.

        Only names in ``trainable`` (adapter names, or ``"base"``) are returned;
        ``None`` means base plus every enabled adapter. Frozen adapters still
        shape the effective weights the gradient flows through.
        """
        enabled = self.enabled if enabled is None else frozenset(enabled)
        eff = self.effective_params(enabled)
        cache = ForwardCache()
        mlp_forward(eff, self.spec, x, cache)
        pgrads, xgrad = mlp_backward(eff, self.spec, x, upstream, cache)
        if trainable is None:
            trainable = {"base"} | set(enabled)
        out = {}
        if "base" in trainable:
            out.update(pgrads.named("base"))
        for name, ad in self.adapters.items():
            if name not in trainable:
                continue
            for k, dw in enumerate(pgrads.weights):
                if name in enabled:
                    out[f"{name}.A.{k}"] = ad.scale * (ad.B[k].T @ dw)
                    out[f"{name}.B.{k}"] = ad.scale * (dw @ ad.A[k].T)
                else:
                    out[f"{name}.A.{k}"] = np.zeros_like(ad.A[k])
                    out[f"{name}.B.{k}"] = np.zeros_like(ad.B[k])
        return out, xgrad

    def named_params(self) -> dict[str, np.ndarray]:
        out = self.base.named("base")
        for name, ad in self.adapters.items():
            for k in range(len(ad.A)):
                out[f"{name}.A.{k}"] = ad.A[k]
                out[f"{name}.B.{k}"] = ad.B[k]
        return out

    def with_params(self, named: dict[str, np.ndarray]) -> "AdapterStack":
        """New stack with any of the named arrays replaced."""
        base = self.base
        if any(k.startswith("base.") for k in named):
            base = ParamSet(
                [named.get(f"base.W.{k}", w) for k, w in enumerate(base.weights)],
                [named.get(f"base.b.{k}", b) for k, b in enumerate(base.biases)],
            )
        adapters = {}
        for name, ad in self.adapters.items():
            if any(k.startswith(name + ".") for k in named):
                ad = LowRankAdapter(
                    name, ad.rank,
                    [named.get(f"{name}.A.{k}", a) for k, a in enumerate(ad.A)],
                    [named.get(f"{name}.B.{k}", b) for k, b in enumerate(ad.B)],
                    ad.scale,
                )
            adapters[name] = ad
        return self._replace(base=base, adapters=adapters)


def attach(stack: AdapterStack, name: str, rank: int, rng: RngStream) -> AdapterStack:
    return stack.attach(name, rank, rng)


def set_enabled(stack: AdapterStack, names) -> AdapterStack:
    return stack.set_enabled(names)


def grad_mask(stack: AdapterStack, trainable):
    """Filter that keeps only gradients of the ``trainable`` adapters' A and B."""
    trainable = frozenset(trainable)
    unknown = trainable - set(stack.adapters) - {"base"}
    if unknown:
        raise KeyError(f"unknown adapters: {sorted(unknown)}")

    def keep(grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        return {k: g for k, g in grads.items() if k.split(".", 1)[0] in trainable}

    keep.trainable = trainable
    return keep
