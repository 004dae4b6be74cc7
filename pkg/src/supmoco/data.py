"""Synthetic multi-domain data, vector augmentations and contrastive batches.

Each domain gets a random offset; each class a centre around that offset;
each sample is its class centre plus isotropic Gaussian noise. Optionally a
low-rank *nuisance* component is added: ``nuisance_rank`` orthonormal
directions shared by every domain, along each of which samples vary with std
``nuisance_sigma`` regardless of class. Labels are what tell a
learner that this variation is irrelevant, which makes supervision matter
for few-shot transfer to unseen classes.

Classes of every domain are split into disjoint train/val/test segments.
Class ids are globally unique across domains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .numcore import ContractError
from .queue import UNLABELED

SPLITS = ("train", "val", "test")
PURE = "pure"
IMPURE = "impure"


@dataclass(frozen=True)
class SyntheticSpec:
    domains: int = 8
    classes_per_domain: int = 15
    samples_per_class: int = 40
    input_dim: int = 32
    class_center_scale: float = 1.0
    within_class_sigma: float = 0.5
    domain_offset_scale: float = 2.0
    # fraction of each domain's classes in (train, val, test)
    split_fractions: tuple[float, float, float] = (2 / 3, 0.0, 1 / 3)
    nuisance_rank: int = 0
    nuisance_sigma: float = 0.0
    # each example gets one of style_count fixed offsets from a shared style_rank subspace
    style_rank: int = 0
    style_count: int = 0
    style_scale: float = 0.0

    def class_counts(self) -> tuple[int, int, int]:
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ContractError(f"split fractions must be three non-negative numbers summing to 1, got {fr}")
        n_val = int(round(fr[1] * self.classes_per_domain))
        n_test = int(round(fr[2] * self.classes_per_domain))
        return self.classes_per_domain - n_val - n_test, n_val, n_test


@dataclass(frozen=True)
class AugmentationSpec:
    noise_sigma: float = 0.1
    scale_jitter: tuple[float, float] = (0.8, 1.2)
    dropout_prob: float = 0.1


@dataclass
class Dataset:
    """Examples as parallel arrays. ``split`` holds 0/1/2 for train/val/test."""

    features: np.ndarray  # (N, D)
    class_ids: np.ndarray  # (N,)
    domain_ids: np.ndarray  # (N,)
    labeled: np.ndarray  # (N,) bool
    split: np.ndarray  # (N,) int8

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.domain_ids = np.asarray(self.domain_ids, dtype=np.int64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        self.split = np.asarray(self.split, dtype=np.int8)

    def __len__(self) -> int:
        return self.class_ids.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def visible_labels(self) -> np.ndarray:
        """Class ids as training sees them: UNLABELED where masked."""
        return np.where(self.labeled, self.class_ids, UNLABELED)

    def indices(self, split: str, domain: int | None = None) -> np.ndarray:
        mask = self.split == SPLITS.index(split)
        if domain is not None:
            mask &= self.domain_ids == domain
        return np.flatnonzero(mask)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.class_ids[idx], self.domain_ids[idx], self.labeled[idx], self.split[idx])

    def domains(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.domain_ids))


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    n_train, n_val, n_test = spec.class_counts()
    D = spec.input_dim
    if spec.nuisance_rank > D or spec.style_rank > D:
        raise ContractError("nuisance_rank and style_rank cannot exceed input_dim")
    # orthonormal rows spanning the shared nuisance subspace
    nuisance = np.linalg.qr(rng.standard_normal((D, spec.nuisance_rank)))[0].T if spec.nuisance_rank else None
    feats, cls, dom, split = [], [], [], []
    per_domain_split = np.repeat(np.arange(3, dtype=np.int8), (n_train, n_val, n_test))
    for d in range(spec.domains):
        offset = spec.domain_offset_scale * rng.standard_normal(D)
        order = rng.permutation(spec.classes_per_domain)
        for c in range(spec.classes_per_domain):
            center = offset + spec.class_center_scale * rng.standard_normal(D)
            x = center + spec.within_class_sigma * rng.standard_normal((spec.samples_per_class, D))
            if nuisance is not None:
                coef = spec.nuisance_sigma * rng.standard_normal((spec.samples_per_class, spec.nuisance_rank))
                x = x + coef @ nuisance
            feats.append(x)
            cls.append(np.full(spec.samples_per_class, d * spec.classes_per_domain + c))
            dom.append(np.full(spec.samples_per_class, d))
            split.append(np.full(spec.samples_per_class, per_domain_split[order[c]]))
    feats = np.concatenate(feats) if feats else np.zeros((0, D))
    cls = np.concatenate(cls) if cls else np.zeros(0)
    if spec.style_rank and spec.style_count:
        basis = np.linalg.qr(rng.standard_normal((D, spec.style_rank)))[0].T
        styles = spec.style_scale * rng.standard_normal((spec.style_count, spec.style_rank)) @ basis
        feats = feats + styles[rng.integers(0, spec.style_count, feats.shape[0])]
    return Dataset(
        feats,
        cls,
        np.concatenate(dom) if dom else np.zeros(0),
        np.ones(cls.shape[0], dtype=bool),
        np.concatenate(split) if split else np.zeros(0),
    )


class Augmenter(Protocol):
    def __call__(self, features: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


def augment(features, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    """Random view of one vector or of each row of a matrix.

    Each row is multiplied by a factor uniform in ``scale_jitter``, gets
    Gaussian noise of std ``noise_sigma``, then each coordinate is zeroed
    independently with probability ``dropout_prob``.
    """
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    lo, hi = spec.scale_jitter
    s = rng.uniform(lo, hi, size=(x.shape[0], 1))
    out = x * s + spec.noise_sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= spec.dropout_prob
    out = np.where(keep, out, 0.0)
    return out[0] if single else out


def vector_augmenter(spec: AugmentationSpec) -> Callable[[np.ndarray, np.random.Generator], np.ndarray]:
    return lambda features, rng: augment(features, spec, rng)


def mask_labels(dataset: Dataset, fractions, rng: np.random.Generator, default: float = 1.0) -> Dataset:
    """Keep labels on a random ``ceil(f * n_c)`` examples of every class.

    ``fractions`` maps domain id to the labeled fraction ``f`` (domains not
    listed use ``default``); a bare number applies to all domains. Masked
    examples keep their ``class_ids`` for evaluation but are UNLABELED to
    training.
    """
    if not isinstance(fractions, dict):
        fractions, default = {}, float(fractions)
    labeled = np.zeros(len(dataset), dtype=bool)
    for c in np.unique(dataset.class_ids):
        members = np.flatnonzero(dataset.class_ids == c)
        f = float(fractions.get(int(dataset.domain_ids[members[0]]), default))
        if not 0.0 <= f <= 1.0:
            raise ContractError(f"labeled fraction must be in [0, 1], got {f}")
        keep = min(members.size, math.ceil(f * members.size - 1e-9))
        chosen = rng.choice(members, size=keep, replace=False) if keep else members[:0]
        labeled[chosen] = True
    return replace(dataset, labeled=labeled)


# ---------------------------------------------------------------------------
# Contrastive batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int = 64
    positives: int = 3
    mixing: str = IMPURE
    # queries arrive in groups of ``positives`` same-class images, each with
    # only its own augmented view as key (the SupCon batch layout)
    grouped: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.positives < 1:
            raise ContractError("batch_size and positives must be >= 1")
        if self.mixing not in (PURE, IMPURE):
            raise ContractError(f"mixing must be {PURE!r} or {IMPURE!r}, got {self.mixing!r}")


@dataclass
class ContrastiveBatch:
    query_views: np.ndarray  # (n, D)
    key_views: np.ndarray  # (M, D); each query's self view precedes its extra positives
    key_owner: np.ndarray  # (M,) query index of every key
    labels: np.ndarray  # (n,) visible label or UNLABELED
    domains: np.ndarray  # (n,)
    sources: np.ndarray  # (n,) dataset index of each query
    key_sources: np.ndarray  # (M,)

    @property
    def self_key_index(self) -> np.ndarray:
        """Row in ``key_views`` of each query's own augmented view."""
        starts = np.flatnonzero(np.r_[True, self.key_owner[1:] != self.key_owner[:-1]])
        return starts

    def keys_per_query(self) -> np.ndarray:
        return np.bincount(self.key_owner, minlength=self.labels.shape[0])


class TrainIndex:
    """Lookup tables over the train split, built once per dataset."""

    def __init__(self, dataset: Dataset):
        self.train = dataset.indices("train")
        if self.train.size == 0:
            raise ContractError("dataset has no train examples")
        self.visible = dataset.visible_labels()
        self.by_domain = {d: self.train[dataset.domain_ids[self.train] == d] for d in np.unique(dataset.domain_ids[self.train])}
        self.domain_list = sorted(self.by_domain)
        labeled = self.train[self.visible[self.train] != UNLABELED]
        self.by_class = {}
        if labeled.size:
            order = np.argsort(self.visible[labeled], kind="stable")
            lab_sorted = labeled[order]
            classes, starts = np.unique(self.visible[lab_sorted], return_index=True)
            for c, group in zip(classes, np.split(lab_sorted, starts[1:])):
                self.by_class[int(c)] = group


def _peers(index: TrainIndex, src: int, label: int, count: int, rng) -> np.ndarray:
    """``count`` other labeled members of ``label``; replacement only if too few."""
    group = index.by_class.get(label)
    others = group[group != src] if group is not None else np.zeros(0, dtype=np.int64)
    if others.size == 0:
        return np.full(count, src, dtype=np.int64)
    replace_ = others.size < count
    return rng.choice(others, size=count, replace=replace_)


def build_contrastive_batch(
    dataset: Dataset,
    plan: BatchPlan,
    rng: np.random.Generator,
    augmenter: Callable[[np.ndarray, np.random.Generator], np.ndarray] | None = None,
    index: TrainIndex | None = None,
) -> ContrastiveBatch:
    """Sample ``plan.batch_size`` train queries and their key views.

    IMPURE draws queries uniformly from the concatenated train split; PURE
    draws them all from one uniformly chosen domain. A labeled query gets its
    own augmented view followed by ``P - 1`` augmented same-class images
    (distinct when the class has enough labeled members, repeated
    augmentations of the query itself when it has none). An UNLABELED query
    gets only its own view.

    Pass a prebuilt ``TrainIndex(dataset)`` to avoid rebuilding the lookup
    tables on every call.
    """
    augmenter = augmenter or vector_augmenter(AugmentationSpec())
    index = index if index is not None else TrainIndex(dataset)
    n, P = plan.batch_size, plan.positives
    if plan.mixing == PURE:
        dom = index.domain_list[int(rng.integers(len(index.domain_list)))]
        pool = index.by_domain[dom]
    else:
        pool = index.train

    if plan.grouped:
        sources = []
        while len(sources) < n:
            anchor = int(pool[rng.integers(pool.size)])
            sources.append(anchor)
            label = int(index.visible[anchor])
            if label != UNLABELED and P > 1:
                take = min(P - 1, n - len(sources))
                if take:
                    sources.extend(int(s) for s in _peers(index, anchor, label, take, rng))
        sources = np.asarray(sources, dtype=np.int64)
    else:
        sources = pool[rng.integers(pool.size, size=n)]

    labels = index.visible[sources]
    key_src, owner = [], []
    for i, (src, lab) in enumerate(zip(sources, labels)):
        key_src.append(src)
        owner.append(i)
        if lab != UNLABELED and P > 1 and not plan.grouped:
            peers = _peers(index, int(src), int(lab), P - 1, rng)
            key_src.extend(peers)
            owner.extend([i] * (P - 1))
    key_src = np.asarray(key_src, dtype=np.int64)
    q_views = augmenter(dataset.features[sources], rng)
    k_views = augmenter(dataset.features[key_src], rng)
    return ContrastiveBatch(
        q_views,
        k_views,
        np.asarray(owner, dtype=np.int64),
        labels.astype(np.int64),
        dataset.domain_ids[sources],
        sources,
        key_src,
    )


# ---------------------------------------------------------------------------
# Delimited-text dataset format
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``dim=<D>``, split annotations, then one example per line.

    Data lines are ``domain_id,class_id,labeled_flag,f1,...,fD``. Split
    membership is recorded in ``# split <name> <class ids>`` comment lines
    after the header; readers that ignore ``#`` lines still parse the file.
    """
    lines = [f"dim={dataset.input_dim}"]
    for si, name in enumerate(SPLITS):
        classes = np.unique(dataset.class_ids[dataset.split == si])
        lines.append(f"# split {name} " + ",".join(str(int(c)) for c in classes))
    for x, c, d, lab in zip(dataset.features, dataset.class_ids, dataset.domain_ids, dataset.labeled):
        lines.append(f"{int(d)},{int(c)},{int(lab)}," + ",".join(repr(float(v)) for v in x))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path, split_fractions=(2 / 3, 0.0, 1 / 3), rng: np.random.Generator | None = None) -> Dataset:
    """Read the delimited-text format.

    Files without ``# split`` lines get their classes split per domain with
    ``split_fractions`` using ``rng`` (seed 0 when omitted).
    """
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("dim="):
        raise ValueError(f"{path}: first line must be dim=<input_dim>")
    dim = int(text[0][4:])
    split_of: dict[int, int] = {}
    rows = []
    for lineno, line in enumerate(text[1:], start=2):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) >= 2 and parts[0] == "split" and parts[1] in SPLITS:
                for c in (parts[2].split(",") if len(parts) > 2 else []):
                    split_of[int(c)] = SPLITS.index(parts[1])
            continue
        fields = line.split(",")
        if len(fields) != dim + 3:
            raise ValueError(f"{path}:{lineno}: expected {dim + 3} fields, got {len(fields)}")
        rows.append(fields)
    if rows:
        meta = np.array([[int(f[0]), int(f[1]), int(f[2])] for f in rows], dtype=np.int64)
        feats = np.array([[float(v) for v in f[3:]] for f in rows], dtype=np.float64)
    else:
        meta, feats = np.zeros((0, 3), dtype=np.int64), np.zeros((0, dim))
    classes = meta[:, 1]
    if not split_of:
        rng = rng if rng is not None else np.random.default_rng(0)
        spec = SyntheticSpec(split_fractions=tuple(split_fractions))
        for d in np.unique(meta[:, 0]):
            cls = np.unique(classes[meta[:, 0] == d])
            spec_d = replace(spec, classes_per_domain=cls.size)
            counts = spec_d.class_counts()
            assign = np.repeat(np.arange(3), counts)
            for c, s in zip(rng.permutation(cls), assign):
                split_of[int(c)] = int(s)
    split = np.array([split_of.get(int(c), 0) for c in classes], dtype=np.int8)
    return Dataset(feats, classes, meta[:, 0], meta[:, 2].astype(bool), split)
