"""Synthetic subject worlds with analytic oracles, and the toy car-colour mixture.

A scene is ``x = Q @ (signal_scale * [s; c]) + noise`` for a unit subject vector
``s``, a context vector ``c`` and a seeded orthogonal ``Q``. Because ``Q`` is
known, the subject and context blocks of any generated vector can be recovered
exactly, which is what the fidelity and alignment oracles score.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numcore import RngStream, tag_of


@dataclass(frozen=True)
class WorldSpec:
    subject_dim: int = 8
    context_dim: int = 8
    obs_noise_std: float = 0.02
    n_subjects: int = 64
    contexts_per_subject: int = 16
    cimg_noise_std: float = 0.01
    signal_scale: float = 3.0
    heldout_frac: float = 0.25
    identity_mixing: bool = False

    def __post_init__(self):
        if self.subject_dim < 1 or self.context_dim < 1:
            raise ValueError("subject_dim and context_dim must be >= 1")
        if self.obs_noise_std < 0 or self.cimg_noise_std < 0:
            raise ValueError("noise stds must be >= 0")
        if self.n_subjects < 2 or self.contexts_per_subject < 1:
            raise ValueError("need n_subjects >= 2 and contexts_per_subject >= 1")
        if not 0 < self.heldout_frac < 1:
            raise ValueError("heldout_frac must lie in (0, 1)")

    @property
    def data_dim(self) -> int:
        return self.subject_dim + self.context_dim

    @property
    def cond_dim(self) -> int:
        # c_img, c_text, generic flag, null flag
        return self.subject_dim + self.context_dim + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ConditionPair:
    c_img: np.ndarray
    c_text: np.ndarray
    degraded_flag: bool = False
    generic_flag: bool = False
    null_flag: bool = False

    def __post_init__(self):
        if self.null_flag and (np.any(self.c_img) or np.any(self.c_text)):
            raise ValueError("a null condition must have zeroed embeddings")

    def vector(self) -> np.ndarray:
        """Network-facing row ``[c_img, c_text, generic, null]``.

        ``degraded_flag`` is record metadata only; the network never sees it.
        """
        return np.concatenate([self.c_img, self.c_text, [float(self.generic_flag), float(self.null_flag)]])


def null_condition_pair(spec: WorldSpec) -> ConditionPair:
    return ConditionPair(np.zeros(spec.subject_dim), np.zeros(spec.context_dim), null_flag=True)


@dataclass(frozen=True)
class Triplet:
    x_tgt: np.ndarray
    cond: ConditionPair
    subject_id: int
    context_id: int


@dataclass(frozen=True)
class Quadruplet:
    x_tgt: np.ndarray
    cond: ConditionPair
    subject_id: int
    context_id: int
    x_neg: np.ndarray
    provenance: str


def random_orthogonal(n: int, rng: RngStream) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal((n, n)))
    return q * np.sign(np.diag(r))


def cosine(a, b):
    """Row-wise cosine; rows with a zero vector give 0 and a set flag."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    cos = np.where(zero, 0.0, np.sum(a * b, axis=1) / denom)
    return np.clip(cos, -1.0, 1.0), zero


class World:
    """A generated subject world: mixing matrix, subjects, and triplet records."""

    def __init__(self, spec, seed, Q, subjects, subject_id, context_id, contexts, x_tgt, c_img, heldout):
        self.spec = spec
        self.seed = int(seed)
        self.Q = Q
        self.subjects = subjects
        self.subject_id = subject_id
        self.context_id = context_id
        self.contexts = contexts
        self.x_tgt = x_tgt
        self.c_img = c_img
        self.heldout = np.asarray(sorted(heldout), dtype=np.int64)

    def __len__(self):
        return self.x_tgt.shape[0]

    @property
    def train_subjects(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.spec.n_subjects), self.heldout)

    def indices(self, split: str) -> np.ndarray:
        held = np.isin(self.subject_id, self.heldout)
        if split == "train":
            return np.flatnonzero(~held)
        if split == "heldout":
            return np.flatnonzero(held)
        if split == "all":
            return np.arange(len(self))
        raise ValueError(f"unknown split {split!r}")

    def condition(self, i: int) -> ConditionPair:
        return ConditionPair(self.c_img[i].copy(), self.contexts[i].copy())

    def cond_matrix(self, idx) -> np.ndarray:
        idx = np.asarray(idx)
        n = idx.size
        return np.concatenate([self.c_img[idx], self.contexts[idx], np.zeros((n, 2))], axis=1)

    def triplet(self, i: int) -> Triplet:
        return Triplet(self.x_tgt[i].copy(), self.condition(i), int(self.subject_id[i]), int(self.context_id[i]))

    def unmix(self, x) -> np.ndarray:
        """Subject and context blocks of ``x`` in units of the unit-norm latents."""
        return (np.atleast_2d(x) @ self.Q) / self.spec.signal_scale

    def mix(self, s, c) -> np.ndarray:
        z = np.concatenate([np.atleast_2d(s), np.atleast_2d(c)], axis=1)
        return self.spec.signal_scale * (z @ self.Q.T)

    def clean_scene(self, i: int) -> np.ndarray:
        return self.mix(self.subjects[self.subject_id[i]], self.contexts[i])[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "Q": self.Q, "subjects": self.subjects, "subject_id": self.subject_id,
            "context_id": self.context_id, "contexts": self.contexts, "x_tgt": self.x_tgt,
            "c_img": self.c_img, "heldout": self.heldout,
        }

    @classmethod
    def from_arrays(cls, spec: WorldSpec, seed: int, a: dict) -> "World":
        return cls(spec, seed, a["Q"], a["subjects"], a["subject_id"], a["context_id"], a["contexts"],
                   a["x_tgt"], a["c_img"], a["heldout"])


def _draw_subjects(spec: WorldSpec, rng: RngStream, max_cos: float = 0.9) -> np.ndarray:
    subjects: list[np.ndarray] = []
    attempt = 0
    while len(subjects) < spec.n_subjects:
        s = rng.split(attempt).normal(spec.subject_dim)
        attempt += 1
        s /= np.linalg.norm(s)
        if spec.subject_dim >= 2 and subjects and np.max(np.asarray(subjects) @ s) >= max_cos:
            if attempt > 1000 * spec.n_subjects:
                raise RuntimeError("could not draw sufficiently distinct subjects")
            continue
        subjects.append(s)
    return np.asarray(subjects)


def gen_world(spec: WorldSpec, seed: int) -> World:
    root = RngStream(seed, tag_of("world"))
    k, m = spec.subject_dim, spec.context_dim
    Q = np.eye(spec.data_dim) if spec.identity_mixing else random_orthogonal(spec.data_dim, root.split(1))
    subjects = _draw_subjects(spec, root.split(2))
    n_held = max(1, int(round(spec.heldout_frac * spec.n_subjects)))
    heldout = root.split(3).permutation(spec.n_subjects)[:n_held]

    n = spec.n_subjects * spec.contexts_per_subject
    subject_id = np.repeat(np.arange(spec.n_subjects), spec.contexts_per_subject)
    context_id = np.tile(np.arange(spec.contexts_per_subject), spec.n_subjects)
    contexts = np.empty((n, m))
    noise = np.empty((n, spec.data_dim))
    cimg_noise = np.empty((n, k))
    rec = root.split(4)
    for i in range(n):
        r = rec.split(i)
        contexts[i] = r.normal(m) / np.sqrt(m)
        noise[i] = r.normal(spec.data_dim)
        cimg_noise[i] = r.normal(k)
    z = np.concatenate([subjects[subject_id], contexts], axis=1)
    x_tgt = spec.signal_scale * (z @ Q.T) + spec.obs_noise_std * noise
    c_img = subjects[subject_id] + spec.cimg_noise_std * cimg_noise
    return World(spec, seed, Q, subjects, subject_id, context_id, contexts, x_tgt, c_img, heldout)


def fidelity_oracle(x_gen, subject_id, world: World, return_flags: bool = False):
    """Cosine between the unmixed subject block of ``x_gen`` and the true subject."""
    x = np.atleast_2d(x_gen)
    if x.shape[1] != world.spec.data_dim:
        raise ValueError(f"x_gen has dim {x.shape[1]}, world expects {world.spec.data_dim}")
    s_hat = world.unmix(x)[:, : world.spec.subject_dim]
    ids = np.broadcast_to(np.asarray(subject_id), (x.shape[0],))
    cos, zero = cosine(s_hat, world.subjects[ids])
    if np.ndim(x_gen) == 1:
        cos, zero = float(cos[0]), bool(zero[0])
    return (cos, zero) if return_flags else cos


def alignment_oracle(x_gen, record_index, world: World, return_flags: bool = False):
    """Cosine between the unmixed context block of ``x_gen`` and the record's context.

    Contexts are drawn per record, so the record index identifies the context.
    """
    x = np.atleast_2d(x_gen)
    if x.shape[1] != world.spec.data_dim:
        raise ValueError(f"x_gen has dim {x.shape[1]}, world expects {world.spec.data_dim}")
    c_hat = world.unmix(x)[:, world.spec.subject_dim:]
    idx = np.broadcast_to(np.asarray(record_index), (x.shape[0],))
    cos, zero = cosine(c_hat, world.contexts[idx])
    if np.ndim(x_gen) == 1:
        cos, zero = float(cos[0]), bool(zero[0])
    return (cos, zero) if return_flags else cos


# -- toy car-colour mixture -------------------------------------------------

CAR_COND_DIM = 2  # [generic "a photo of a car" token, null flag]


@dataclass
class CarMixture:
    centers: np.ndarray
    sigma: float
    positives: np.ndarray
    negatives: np.ndarray
    negative_modes: np.ndarray
    broad: np.ndarray
    broad_modes: np.ndarray
    seed: int

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    def condition(self, n: int = 1) -> np.ndarray:
        c = np.zeros((n, CAR_COND_DIM))
        c[:, 0] = 1.0
        return c

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "centers": self.centers, "positives": self.positives, "negatives": self.negatives,
            "negative_modes": self.negative_modes, "broad": self.broad, "broad_modes": self.broad_modes,
        }


def car_centers(K: int, radius: float = 3.0) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(K) / K
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_car_mixture(K: int = 4, seed: int = 0, sigma: float = 0.35, radius: float = 3.0,
                    n_pos: int = 500, n_neg: int = 500, n_broad_per_mode: int = 500) -> CarMixture:
    """2-D mixture: mode 0 is the target colour, the rest are the other colours."""
    if K < 2:
        raise ValueError("need K >= 2 modes")
    centers = car_centers(K, radius)
    gaps = np.linalg.norm(centers[:, None] - centers[None], axis=-1) + np.eye(K) * 1e9
    if gaps.min() < 6 * sigma:
        raise ValueError(f"modes too close: min distance {gaps.min():.3f} < 6 sigma")
    root = RngStream(seed, tag_of("cars"))
    positives = centers[0] + sigma * root.split(1).normal((n_pos, 2))
    neg_modes = 1 + root.split(2).integers(K - 1, n_neg)
    negatives = centers[neg_modes] + sigma * root.split(3).normal((n_neg, 2))
    broad_modes = np.repeat(np.arange(K), n_broad_per_mode)
    broad = centers[broad_modes] + sigma * root.split(4).normal((broad_modes.size, 2))
    return CarMixture(centers, sigma, positives, negatives, neg_modes, broad, broad_modes, seed)


def mode_classifier(x, centers) -> np.ndarray | int:
    """Nearest centre by Euclidean distance; ties go to the lowest index."""
    centers = np.atleast_2d(centers)
    if centers.shape[0] == 0:
        raise ValueError("need at least one centre")
    pts = np.atleast_2d(x)
    d2 = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=-1)
    idx = np.argmin(d2, axis=1)
    return int(idx[0]) if np.ndim(x) == 1 else idx
