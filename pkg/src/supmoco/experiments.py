"""The desk benchmark and seeded trial helpers.

The benchmark is 8 domains of 15 classes (10 train, 5 test) with 40
samples each. On top of the class structure every example carries one of
10 large "style" offsets from a shared 8-dim subspace. Style is unrelated
to class, so nearest neighbours in input space mostly share style. Labels
teach the encoder to ignore it; instance discrimination with weak
augmentation has no reason to.

Substreams hanging off a single seed:

====================  ===========================
``(seed, 0)``         encoder init (trainer)
``(seed, 1, step)``   training batches (trainer)
``(seed, 2, j, t)``   evaluation task ``t`` of domain ``j``
``(seed, 3)``         dataset generation
``(seed, 4)``         label masking
``(seed, 5)``         retrieval corpus sampling
====================  ===========================
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .analysis import RetrievalSpec, analyze
from .data import AugmentationSpec, Dataset, SyntheticSpec, generate_synthetic, mask_labels
from .encoder import EncoderConfig, EncoderParams, init_pair
from .fewshot import EpisodeConfig, FinetuneConfig, evaluate
from .numcore import seeded_rng
from .trainer import STREAM_INIT, TrainConfig, TrainResult, train

STREAM_DATA = 3
STREAM_MASK = 4
STREAM_RETRIEVAL = 5

BENCHMARK_DATA = SyntheticSpec(
    domains=8,
    classes_per_domain=15,
    samples_per_class=40,
    input_dim=32,
    split_fractions=(2 / 3, 0.0, 1 / 3),
    within_class_sigma=0.5,
    style_rank=8,
    style_count=10,
    style_scale=4.0,
)
BENCHMARK_AUGMENTATION = AugmentationSpec(noise_sigma=0.02, scale_jitter=(0.95, 1.05), dropout_prob=0.0)
BENCHMARK_ENCODER = EncoderConfig()
BENCHMARK_TRAIN = TrainConfig(epochs=60)
# 5-way 5-shot, 13 tasks in each of 8 domains
BENCHMARK_EPISODE = EpisodeConfig(ways=(5, 5), shots=(5, 5), queries_per_class=10, tasks=13)
# variable-way variable-shot; fewer tasks than the 600 used at scale
CLI_EPISODE = EpisodeConfig(ways=(5, 20), shots=(1, 10), queries_per_class=10, tasks=50)


@dataclass(frozen=True)
class LabelSpec:
    """Which training labels stay visible.

    Domains in ``full_domains`` keep every label; all other domains keep
    ``fraction`` of each class.
    """

    fraction: float = 1.0
    full_domains: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError(f"label fraction must lie in [0, 1], got {self.fraction}")


def make_dataset(spec: SyntheticSpec = BENCHMARK_DATA, seed: int = 0, labels: LabelSpec | None = None) -> Dataset:
    ds = generate_synthetic(spec, seeded_rng(seed, STREAM_DATA))
    if labels is None or labels.fraction == 1.0:
        return ds
    full = {d: 1.0 for d in labels.full_domains}
    return mask_labels(ds, full, seeded_rng(seed, STREAM_MASK), default=labels.fraction)


def few_shot_accuracy(
    params: EncoderParams,
    dataset: Dataset,
    seed: int,
    episode: EpisodeConfig = BENCHMARK_EPISODE,
    finetune: FinetuneConfig = FinetuneConfig(),
) -> float:
    """Mean query accuracy over all tasks of all domains."""
    results = evaluate(params, dataset, episode, finetune, seed=seed)
    return float(np.mean(np.concatenate([r.accuracies for r in results.values()])))


def collapse_fraction(params: EncoderParams, dataset: Dataset, seed: int, spec: RetrievalSpec = RetrievalSpec()) -> float:
    return analyze(params, dataset, spec, seeded_rng(seed, STREAM_RETRIEVAL)).frac_any_same_class


def random_params(seed: int, encoder: EncoderConfig = BENCHMARK_ENCODER) -> EncoderParams:
    """The untrained query encoder a run with ``seed`` would start from."""
    return init_pair(encoder, seeded_rng(seed, STREAM_INIT)).query


@dataclass
class Trial:
    seed: int
    accuracy: float
    collapse: float | None
    result: TrainResult


def run_trial(
    seed: int,
    labels: LabelSpec | None = None,
    data: SyntheticSpec = BENCHMARK_DATA,
    encoder: EncoderConfig = BENCHMARK_ENCODER,
    with_collapse: bool = False,
    **train_overrides,
) -> Trial:
    """Generate, train and evaluate one seeded benchmark run.

    ``train_overrides`` replace fields of the benchmark training config,
    e.g. ``loss="moco"`` or ``positives=1``.
    """
    ds = make_dataset(data, seed, labels)
    cfg = replace(BENCHMARK_TRAIN, seed=seed, **train_overrides)
    res = train(ds, cfg, replace(encoder, input_dim=data.input_dim), BENCHMARK_AUGMENTATION)
    acc = few_shot_accuracy(res.pair.query, ds, seed)
    coll = collapse_fraction(res.pair.query, ds, seed) if with_collapse else None
    return Trial(seed, acc, coll, res)
