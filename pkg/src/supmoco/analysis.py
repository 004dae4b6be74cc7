"""Supervision-collapse diagnostics by nearest-neighbour retrieval.

A corpus mixes images of train and test classes; test images are used as
queries and their ``k`` nearest corpus neighbours (cosine, query excluded)
are tallied three ways:

* neighbours of the query's own (test) class;
* neighbours from train classes;
* the size of the largest group of neighbours sharing one train class.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import SPLITS, Dataset
from .encoder import EncoderParams, embed
from .numcore import ContractError


@dataclass(frozen=True)
class RetrievalSpec:
    per_class_samples: int = 20
    query_count: int = 200
    k: int = 9

    def __post_init__(self):
        if self.k < 1 or self.per_class_samples < 1 or self.query_count < 1:
            raise ContractError(f"invalid retrieval spec {self}")


LARGE_RETRIEVAL = RetrievalSpec(per_class_samples=130, query_count=1000, k=9)


def knn_retrieval(corpus, query_indices, k: int, workers: int = 1) -> np.ndarray:
    """``k`` most cosine-similar corpus rows for each query row (itself excluded).

    Rows are assumed unit norm. Ties go to the lower corpus index. With
    ``workers > 1`` query chunks run on threads; each row's result is the
    same either way.
    """
    C = np.asarray(corpus, dtype=np.float64)
    qi = np.asarray(query_indices, dtype=np.int64)
    if k >= C.shape[0]:
        raise ContractError(f"k={k} needs a corpus larger than {C.shape[0]}")
    if workers <= 1 or qi.size < 2:
        return kernels.topk_rows(C[qi] @ C.T, qi, k)
    chunks = np.array_split(qi, min(workers, qi.size))
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(lambda c: kernels.topk_rows(C[c] @ C.T, c, k), chunks))
    return np.concatenate(parts)


@dataclass
class CollapseReport:
    hist_same_test_class: np.ndarray
    hist_from_train: np.ndarray
    hist_max_same_train_class: np.ndarray

    @property
    def query_count(self) -> int:
        return int(self.hist_same_test_class.sum())

    @property
    def k(self) -> int:
        return self.hist_same_test_class.shape[0] - 1

    @property
    def frac_any_same_class(self) -> float:
        """Share of queries with at least one neighbour from their own class."""
        return float(1.0 - self.hist_same_test_class[0] / self.query_count)

    @property
    def frac_train_class_ge2(self) -> float:
        """Share of queries where two or more neighbours share one train class."""
        return float(self.hist_max_same_train_class[2:].sum() / self.query_count)

    @property
    def frac_all_test(self) -> float:
        return float(self.hist_from_train[0] / self.query_count)

    def summary(self) -> dict[str, float]:
        return {
            "frac_any_same_class": self.frac_any_same_class,
            "frac_train_class_ge2": self.frac_train_class_ge2,
            "frac_all_test": self.frac_all_test,
            "mean_same_class": float(np.arange(self.k + 1) @ self.hist_same_test_class / self.query_count),
            "mean_from_train": float(np.arange(self.k + 1) @ self.hist_from_train / self.query_count),
        }


def collapse_report(neighbors, corpus_labels, corpus_is_train, query_labels) -> CollapseReport:
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.int64))
    k = neighbors.shape[1]
    same, train, group = kernels.collapse_counts(neighbors, corpus_labels, corpus_is_train, query_labels)
    bins = k + 1
    return CollapseReport(
        np.bincount(same, minlength=bins),
        np.bincount(train, minlength=bins),
        np.bincount(group, minlength=bins),
    )


def build_corpus(dataset: Dataset, spec: RetrievalSpec, rng: np.random.Generator, query_split: str = "test"):
    """Sample the retrieval corpus and the query positions within it.

    Up to ``per_class_samples`` examples of each train and ``query_split``
    class; ``query_count`` queries drawn from the ``query_split`` part.
    Returns ``(dataset indices, is_train flags, query positions)``.
    """
    train_code, query_code = SPLITS.index("train"), SPLITS.index(query_split)
    rows = []
    for c in np.unique(dataset.class_ids):
        members = np.flatnonzero(dataset.class_ids == c)
        if dataset.split[members[0]] not in (train_code, query_code):
            continue
        take = min(spec.per_class_samples, members.size)
        rows.append(np.sort(rng.choice(members, size=take, replace=False)))
    idx = np.concatenate(rows)
    is_train = dataset.split[idx] == train_code
    test_pos = np.flatnonzero(~is_train)
    q = np.sort(rng.choice(test_pos, size=min(spec.query_count, test_pos.size), replace=False))
    return idx, is_train, q


def analyze(
    params: EncoderParams, dataset: Dataset, spec: RetrievalSpec, rng: np.random.Generator, workers: int = 1
) -> CollapseReport:
    """Collapse report for backbone embeddings (projection head discarded)."""
    idx, is_train, q = build_corpus(dataset, spec, rng)
    emb = embed(params, dataset.features[idx], include_head=False, track_grad=False).values
    labels = dataset.class_ids[idx]
    neighbors = knn_retrieval(emb, q, spec.k, workers)
    return collapse_report(neighbors, labels, is_train, labels[q])


def write_report(report: CollapseReport, path) -> None:
    k = report.k
    lines = ["bin,same_test_class,from_train,max_same_train_class"]
    for b in range(k + 1):
        lines.append(
            f"{b},{int(report.hist_same_test_class[b])},{int(report.hist_from_train[b])},"
            f"{int(report.hist_max_same_train_class[b])}"
        )
    lines.append("# summary")
    lines.append(f"query_count,{report.query_count}")
    lines.append(f"k,{k}")
    lines += [f"{name},{value!r}" for name, value in report.summary().items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
