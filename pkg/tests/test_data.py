import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from supmoco.data import (
    IMPURE,
    PURE,
    AugmentationSpec,
    BatchPlan,
    SyntheticSpec,
    TrainIndex,
    augment,
    build_contrastive_batch,
    generate_synthetic,
    load_dataset,
    mask_labels,
    save_dataset,
)
from supmoco.numcore import ContractError, seeded_rng
from supmoco.queue import UNLABELED

SMALL = SyntheticSpec(domains=3, classes_per_domain=6, samples_per_class=8, input_dim=5, split_fractions=(0.5, 0.0, 0.5))


def test_counts_and_unique_class_ids():
    ds = generate_synthetic(SyntheticSpec(domains=8, classes_per_domain=10, samples_per_class=20), seeded_rng(0))
    assert len(ds) == 1600
    assert np.unique(ds.class_ids).size == 80
    for c in np.unique(ds.class_ids):
        assert np.unique(ds.domain_ids[ds.class_ids == c]).size == 1


def test_zero_sigma_collapses_each_class():
    ds = generate_synthetic(SyntheticSpec(domains=2, classes_per_domain=3, samples_per_class=4, within_class_sigma=0.0), seeded_rng(1))
    for c in np.unique(ds.class_ids):
        x = ds.features[ds.class_ids == c]
        assert np.all(x == x[0])


def test_generation_is_seeded():
    a, b = generate_synthetic(SMALL, seeded_rng(2)), generate_synthetic(SMALL, seeded_rng(2))
    assert a.features.tobytes() == b.features.tobytes() and np.array_equal(a.split, b.split)


def test_splits_are_disjoint_per_class():
    ds = generate_synthetic(SyntheticSpec(), seeded_rng(3))
    for c in np.unique(ds.class_ids):
        assert np.unique(ds.split[ds.class_ids == c]).size == 1
    for d in ds.domains():
        per_split = [np.unique(ds.class_ids[(ds.domain_ids == d) & (ds.split == s)]).size for s in range(3)]
        assert per_split == [10, 0, 5]


def test_bad_split_fractions():
    with pytest.raises(ContractError):
        generate_synthetic(SyntheticSpec(split_fractions=(0.5, 0.2, 0.2)), seeded_rng(0))


def test_nuisance_lives_in_a_low_rank_subspace():
    spec = SyntheticSpec(domains=1, classes_per_domain=2, samples_per_class=50, input_dim=10, within_class_sigma=0.0, nuisance_rank=2, nuisance_sigma=1.0)
    ds = generate_synthetic(spec, seeded_rng(4))
    x = ds.features[ds.class_ids == 0]
    assert np.linalg.matrix_rank(x - x.mean(axis=0), tol=1e-8) == 2


# -- augmentation ------------------------------------------------------------------


def test_augment_identity_and_full_dropout():
    x = seeded_rng(5).standard_normal(7)
    ident = AugmentationSpec(noise_sigma=0.0, scale_jitter=(1.0, 1.0), dropout_prob=0.0)
    assert np.array_equal(augment(x, ident, seeded_rng(0)), x)
    assert np.array_equal(augment(x, AugmentationSpec(dropout_prob=1.0), seeded_rng(0)), np.zeros(7))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 9))
def test_augment_keeps_shape_and_is_seeded(seed, n, d):
    x = seeded_rng(seed).standard_normal((n, d))
    a = augment(x, AugmentationSpec(), seeded_rng(seed, 1))
    b = augment(x, AugmentationSpec(), seeded_rng(seed, 1))
    assert a.shape == x.shape and a.tobytes() == b.tobytes()


# -- masking -----------------------------------------------------------------------


def test_mask_fraction_examples():
    ds = generate_synthetic(SyntheticSpec(domains=2, classes_per_domain=3, samples_per_class=20), seeded_rng(6))
    assert mask_labels(ds, 1.0, seeded_rng(0)).labeled.all()
    assert not mask_labels(ds, 0.0, seeded_rng(0)).labeled.any()
    tenth = mask_labels(ds, 0.1, seeded_rng(0))
    for c in np.unique(ds.class_ids):
        assert tenth.labeled[ds.class_ids == c].sum() == 2
    # masked examples keep their class ids
    assert np.array_equal(tenth.class_ids, ds.class_ids)
    assert set(np.unique(tenth.visible_labels()[~tenth.labeled])) == {UNLABELED}


def test_mask_per_domain_map():
    ds = generate_synthetic(SMALL, seeded_rng(7))
    m = mask_labels(ds, {0: 1.0}, seeded_rng(0), default=0.25)
    assert m.labeled[ds.domain_ids == 0].all()
    for c in np.unique(ds.class_ids[ds.domain_ids != 0]):
        assert m.labeled[ds.class_ids == c].sum() == 2
    with pytest.raises(ContractError):
        mask_labels(ds, {1: 1.5}, seeded_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(1, 30))
def test_mask_keeps_ceiling_per_class(f, n):
    spec = SyntheticSpec(domains=1, classes_per_domain=2, samples_per_class=n, input_dim=2, split_fractions=(0.5, 0.0, 0.5))
    ds = generate_synthetic(spec, seeded_rng(n))
    m = mask_labels(ds, f, seeded_rng(1))
    expect = min(n, int(np.ceil(f * n - 1e-9)))
    for c in np.unique(ds.class_ids):
        assert m.labeled[ds.class_ids == c].sum() == expect


# -- batches -----------------------------------------------------------------------


def test_labeled_query_gets_p_keys_self_first():
    ds = generate_synthetic(SMALL, seeded_rng(8))
    aug = AugmentationSpec(noise_sigma=0.0, scale_jitter=(1.0, 1.0), dropout_prob=0.0)
    b = build_contrastive_batch(ds, BatchPlan(batch_size=16, positives=3), seeded_rng(0), lambda x, r: augment(x, aug, r))
    assert b.keys_per_query().tolist() == [3] * 16
    first = b.self_key_index
    assert np.array_equal(b.key_sources[first], b.sources)
    for i in range(16):
        peers = b.key_sources[b.key_owner == i][1:]
        assert np.all(ds.class_ids[peers] == ds.class_ids[b.sources[i]])
        assert np.all(peers != b.sources[i]) and np.unique(peers).size == 2
    assert np.array_equal(b.key_views[first], ds.features[b.sources])


def test_unlabeled_query_gets_one_key():
    ds = mask_labels(generate_synthetic(SMALL, seeded_rng(9)), 0.0, seeded_rng(0))
    b = build_contrastive_batch(ds, BatchPlan(batch_size=10, positives=3), seeded_rng(1))
    assert b.keys_per_query().tolist() == [1] * 10
    assert np.all(b.labels == UNLABELED)


def test_singleton_class_repeats_itself():
    ds = generate_synthetic(SMALL, seeded_rng(10))
    ds = mask_labels(ds, 1 / 8, seeded_rng(0))  # one labeled member per class
    b = build_contrastive_batch(ds, BatchPlan(batch_size=40, positives=3), seeded_rng(2))
    for i in np.flatnonzero(b.labels != UNLABELED):
        assert np.all(b.key_sources[b.key_owner == i] == b.sources[i])


def test_pure_batches_share_a_domain():
    ds = generate_synthetic(SMALL, seeded_rng(11))
    for s in range(10):
        b = build_contrastive_batch(ds, BatchPlan(batch_size=12, mixing=PURE), seeded_rng(s))
        assert np.unique(b.domains).size == 1


def test_batches_use_only_train_examples():
    ds = generate_synthetic(SMALL, seeded_rng(12))
    for s in range(10):
        for mixing in (PURE, IMPURE):
            b = build_contrastive_batch(ds, BatchPlan(batch_size=12, mixing=mixing), seeded_rng(s))
            assert np.all(ds.split[b.sources] == 0) and np.all(ds.split[b.key_sources] == 0)


def test_batch_sequence_is_byte_identical():
    ds = generate_synthetic(SMALL, seeded_rng(13))

    def seq():
        rng, index = seeded_rng(3), TrainIndex(ds)
        return b"".join(
            build_contrastive_batch(ds, BatchPlan(batch_size=8), rng, index=index).key_views.tobytes() for _ in range(5)
        )

    assert seq() == seq()


def test_impure_domain_counts_are_proportional():
    # unequal domain sizes: drop half of domain 2's train classes
    ds = generate_synthetic(SyntheticSpec(domains=3, classes_per_domain=6, samples_per_class=10, input_dim=4), seeded_rng(14))
    drop = np.isin(ds.class_ids, np.unique(ds.class_ids[(ds.domain_ids == 2) & (ds.split == 0)])[:2])
    ds = ds.subset(np.flatnonzero(~drop))
    train = ds.indices("train")
    sizes = np.bincount(ds.domain_ids[train], minlength=3)
    rng, index = seeded_rng(4), TrainIndex(ds)
    counts = np.zeros(3)
    for _ in range(300):
        b = build_contrastive_batch(ds, BatchPlan(batch_size=32, positives=1), rng, index=index)
        counts += np.bincount(b.domains, minlength=3)
    expected = counts.sum() * sizes / sizes.sum()
    assert stats.chisquare(counts, expected).pvalue > 1e-3


def test_batch_plan_validation():
    with pytest.raises(ContractError):
        BatchPlan(batch_size=0)
    with pytest.raises(ContractError):
        BatchPlan(positives=0)
    with pytest.raises(ContractError):
        BatchPlan(mixing="mixed")


# -- file format -------------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    ds = mask_labels(generate_synthetic(SMALL, seeded_rng(15)), 0.5, seeded_rng(0))
    save_dataset(ds, tmp_path / "d.txt")
    back = load_dataset(tmp_path / "d.txt")
    assert back.features.tobytes() == ds.features.tobytes()
    for field in ("class_ids", "domain_ids", "labeled", "split"):
        assert np.array_equal(getattr(back, field), getattr(ds, field))


def test_loader_splits_unannotated_files(tmp_path):
    lines = ["dim=2"] + [f"{c // 3},{c},1,{c}.0,1.5" for c in range(6) for _ in range(2)]
    (tmp_path / "d.txt").write_text("\n".join(lines) + "\n")
    ds = load_dataset(tmp_path / "d.txt")
    for d in (0, 1):
        assert sorted(np.bincount(ds.split[ds.domain_ids == d], minlength=3).tolist()) == [0, 2, 4]


def test_loader_rejects_bad_rows(tmp_path):
    (tmp_path / "d.txt").write_text("dim=3\n0,1,1,0.5,0.5\n")
    with pytest.raises(ValueError, match="expected 6 fields"):
        load_dataset(tmp_path / "d.txt")
    (tmp_path / "e.txt").write_text("0,1,1\n")
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "e.txt")
