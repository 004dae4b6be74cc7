"""Episodic few-shot evaluation.

Each task samples a variable number of ways and per-class shots from the
held-out classes of one domain. A cosine classifier is initialised from the
class prototypes of the support set, then the classifier and a copy of the
backbone are finetuned jointly on the support set only. The query set is
touched only to score the finetuned model.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .encoder import EncoderParams, embed
from .numcore import (
    ContractError,
    DegenerateVectorError,
    NORM_EPS,
    Tape,
    Tensor,
    backward,
    cross_entropy,
    matmul,
    scale,
    seeded_rng,
    transpose,
)
from .trainer import sgd_step

CI_Z = 1.96
STREAM_EVAL = 2  # after the trainer's init (0) and batch (1) streams


@dataclass(frozen=True)
class EpisodeConfig:
    ways: tuple[int, int] = (5, 20)
    shots: tuple[int, int] = (1, 10)
    queries_per_class: int = 10
    tasks: int = 600

    def __post_init__(self):
        (w0, w1), (s0, s1) = self.ways, self.shots
        if w0 < 2 or w1 < w0 or s0 < 1 or s1 < s0 or self.queries_per_class < 1 or self.tasks < 1:
            raise ContractError(f"invalid episode config {self}")


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 50
    lr: float = 0.001
    batch_size: int = 64
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    scale: float = 10.0


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray  # way index 0..W-1
    query_x: np.ndarray
    query_y: np.ndarray
    ways: int
    shots: list[int]
    classes: np.ndarray  # dataset class id of each way
    support_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    query_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def sample_episode(
    dataset: Dataset,
    config: EpisodeConfig,
    rng: np.random.Generator,
    split: str = "test",
    domain: int | None = None,
) -> Episode:
    """Draw one task from the classes of ``split`` (optionally one domain).

    Classes with fewer than ``shots[0] + queries_per_class`` examples are
    skipped; ways are capped at the number of eligible classes.
    """
    pool = dataset.indices(split, domain)
    classes, counts = np.unique(dataset.class_ids[pool], return_counts=True)
    q = config.queries_per_class
    eligible = classes[counts >= config.shots[0] + q]
    if eligible.size < config.ways[0]:
        raise ContractError(
            f"{split} split{'' if domain is None else f' of domain {domain}'} has {eligible.size} usable classes,"
            f" need {config.ways[0]}"
        )
    ways = int(rng.integers(config.ways[0], min(config.ways[1], eligible.size) + 1))
    chosen = np.sort(rng.choice(eligible, size=ways, replace=False))
    s_idx, s_y, q_idx, q_y, shots = [], [], [], [], []
    for w, c in enumerate(chosen):
        members = pool[dataset.class_ids[pool] == c]
        hi = min(config.shots[1], members.size - q)
        k = int(rng.integers(config.shots[0], hi + 1))
        perm = rng.permutation(members)
        s_idx.append(perm[:k])
        q_idx.append(perm[k : k + q])
        s_y.append(np.full(k, w))
        q_y.append(np.full(q, w))
        shots.append(k)
    s_idx, q_idx = np.concatenate(s_idx), np.concatenate(q_idx)
    return Episode(
        dataset.features[s_idx],
        np.concatenate(s_y),
        dataset.features[q_idx],
        np.concatenate(q_y),
        ways,
        shots,
        chosen,
        s_idx,
        q_idx,
    )


def prototypes(embeddings, labels, ways: int | None = None) -> np.ndarray:
    """Unit-normalised mean embedding of each class ``0..ways-1``."""
    E = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64)
    ways = int(labels.max()) + 1 if ways is None else ways
    out = np.empty((ways, E.shape[1]))
    for c in range(ways):
        rows = E[labels == c]
        if rows.shape[0] == 0:
            raise ContractError(f"class {c} has no support embedding")
        m = rows.mean(axis=0)
        norm = np.linalg.norm(m)
        if norm < NORM_EPS:
            raise DegenerateVectorError(f"prototype of class {c} has (near) zero norm")
        out[c] = m / norm
    return out


def cosine_logits(embedding, weights, scale: float = 10.0) -> np.ndarray:
    return scale * (np.asarray(embedding, dtype=np.float64) @ np.asarray(weights, dtype=np.float64).T)


def _backbone_copy(params: EncoderParams) -> EncoderParams:
    return EncoderParams([(Tensor(W.values.copy(), True), Tensor(b.values.copy(), True)) for W, b in params.backbone], [])


def finetune(
    params: EncoderParams,
    support_x: np.ndarray,
    support_y: np.ndarray,
    ways: int,
    config: FinetuneConfig,
    rng: np.random.Generator,
) -> tuple[EncoderParams, np.ndarray]:
    """Finetune a backbone copy and a prototype-initialised cosine classifier.

    Sees only support data. Returns the adapted backbone and classifier rows
    (unit norm).
    """
    net = _backbone_copy(params)
    W = Tensor(prototypes(embed(net, support_x, include_head=False, track_grad=False).values, support_y, ways), True)
    trainable = [*net.backbone_tensors(), W]
    buffers = [np.zeros_like(t.values) for t in trainable]
    n = support_x.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            b = order[start : start + config.batch_size]
            for t in trainable:
                t.grad = None
            with Tape() as tape:
                e = embed(net, support_x[b], include_head=False, track_grad=True)
                loss = cross_entropy(scale(matmul(e, transpose(W)), config.scale), support_y[b])
            backward(tape, loss)
            grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in trainable]
            sgd_step(trainable, grads, buffers, config.lr, config.sgd_momentum, config.weight_decay)
            W.values = W.values / np.linalg.norm(W.values, axis=1, keepdims=True)
    return net, W.values


def finetune_and_eval(
    params: EncoderParams,
    episode: Episode,
    config: FinetuneConfig,
    rng: np.random.Generator,
) -> float:
    net, W = finetune(params, episode.support_x, episode.support_y, episode.ways, config, rng)
    e = embed(net, episode.query_x, include_head=False, track_grad=False).values
    pred = np.argmax(cosine_logits(e, W, config.scale), axis=1)
    return float(np.mean(pred == episode.query_y))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def confidence_interval(accuracies: Sequence[float]) -> float:
    """Half-width ``1.96 * s / sqrt(T)`` with the sample std ``s`` (0 when T < 2)."""
    a = np.asarray(accuracies, dtype=np.float64)
    if a.size < 2 or np.all(a == a[0]):  # exact zero, no rounding residue
        return 0.0
    return float(CI_Z * a.std(ddof=1) / np.sqrt(a.size))


@dataclass
class TaskRecord:
    task_index: int
    ways: int
    total_shots: int
    accuracy: float


@dataclass
class DatasetResult:
    name: str
    tasks: list[TaskRecord]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([t.accuracy for t in self.tasks])

    @property
    def mean(self) -> float:
        return float(self.accuracies.mean())

    @property
    def ci(self) -> float:
        return confidence_interval(self.accuracies)


def _run_task(params, dataset, ep_cfg, ft_cfg, seed, d_pos, domain, t, split):
    rng = seeded_rng(seed, STREAM_EVAL, d_pos, t)
    ep = sample_episode(dataset, ep_cfg, rng, split=split, domain=domain)
    acc = finetune_and_eval(params, ep, ft_cfg, rng)
    return TaskRecord(t, ep.ways, int(sum(ep.shots)), acc)


def evaluate(
    params: EncoderParams,
    dataset: Dataset,
    episode_config: EpisodeConfig = EpisodeConfig(),
    finetune_config: FinetuneConfig = FinetuneConfig(),
    seed: int = 0,
    domains: Sequence[int] | None = None,
    split: str = "test",
    workers: int = 1,
) -> dict[str, DatasetResult]:
    """Mean accuracy and CI per domain over ``episode_config.tasks`` tasks.

    Task ``t`` of the ``j``-th domain uses substream ``(seed, 2, j, t)``, so the
    outcome does not depend on ``workers``.
    """
    domains = dataset.domains() if domains is None else list(domains)
    jobs = [(j, d, t) for j, d in enumerate(domains) for t in range(episode_config.tasks)]

    def run(job):
        j, d, t = job
        return _run_task(params, dataset, episode_config, finetune_config, seed, j, d, t, split)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(job) for job in jobs]
    out = {}
    for j, d in enumerate(domains):
        name = f"domain{d}"
        out[name] = DatasetResult(name, [r for (jj, _, _), r in zip(jobs, records) if jj == j])
    return out


def average_rank(table: Mapping[str, Mapping[str, float]]) -> dict[str, float]:
    """Mean per-dataset rank of each algorithm (1 = best, ties share the mean rank)."""
    algos = list(table)
    if not algos:
        return {}
    datasets = list(table[algos[0]])
    for a in algos:
        if set(table[a]) != set(datasets):
            raise ContractError(f"algorithm {a!r} does not cover every dataset")
    acc = np.array([[float(table[a][d]) for d in datasets] for a in algos])
    if np.isnan(acc).any():
        raise ContractError("table has missing cells")
    ranks = np.column_stack([rankdata(-acc[:, j], method="average") for j in range(acc.shape[1])])
    return {a: float(r) for a, r in zip(algos, ranks.mean(axis=1))}


# ---------------------------------------------------------------------------
# Results file
# ---------------------------------------------------------------------------

RESULTS_HEADER = "dataset,task_index,ways,total_shots,accuracy"
SUMMARY_HEADER = "dataset,mean,ci95,tasks"


def write_results(results: Mapping[str, DatasetResult], path) -> None:
    lines = [RESULTS_HEADER]
    for name, res in results.items():
        lines += [f"{name},{t.task_index},{t.ways},{t.total_shots},{t.accuracy!r}" for t in res.tasks]
    lines += ["# summary", SUMMARY_HEADER]
    lines += [f"{name},{res.mean!r},{res.ci!r},{len(res.tasks)}" for name, res in results.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_results(path) -> dict[str, DatasetResult]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise ValueError(f"{path}: not a results file")
    out: dict[str, DatasetResult] = {}
    for line in lines[1:]:
        if line.startswith("#"):
            break
        name, t, w, s, a = line.split(",")
        out.setdefault(name, DatasetResult(name, [])).tasks.append(TaskRecord(int(t), int(w), int(s), float(a)))
    return out
