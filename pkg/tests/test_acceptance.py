"""Acceptance checks. Each test logs one PASS/FAIL line (see conftest)."""

import time
from functools import lru_cache

import numpy as np

from grids import ALL_DATASETS, IMAGENET_ONLY, REPORTED_RANKS, as_table
from supmoco import oracles
from supmoco.cli import main
from supmoco.data import PURE
from supmoco.encoder import EncoderConfig, embed, init_params, momentum_update
from supmoco.experiments import (
    BENCHMARK_DATA,
    LabelSpec,
    collapse_fraction,
    make_dataset,
    random_params,
    run_trial,
)
from supmoco.fewshot import average_rank, confidence_interval
from supmoco.losses import moco_loss, simclr_loss, supcon_loss, supmoco_loss, two_view_pairs
from supmoco.numcore import finite_diff_check, seeded_rng
from supmoco.queue import UNLABELED, FeatureQueue, QueueSnapshot
from supmoco.trainer import MOCO, SIMCLR, SUPCON, SUPMOCO, Trainer, TrainConfig, load_checkpoint, save_checkpoint

SEEDS = range(5)


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- 1. gradients --------------------------------------------------------------------

GRAD_ENC = EncoderConfig(input_dim=6, backbone_hidden=(10,), backbone_out=5, proj_hidden=4, proj_out=3)


def _loss_fns(rng):
    p = init_params(GRAD_ENC, rng)
    for _, b in p.backbone:
        b.values = 0.1 * rng.standard_normal(b.shape)
    n = 4
    x = rng.standard_normal((2 * n, 6))
    labels = np.array([0, 1, 0, UNLABELED])
    keys = unit(rng, 2 * n, 5)
    owner = np.repeat(np.arange(n), 2)
    queue = QueueSnapshot(unit(rng, 12, 5), rng.integers(-1, 3, 12), np.arange(12))

    def e(rows):
        return embed(p, x[rows], include_head=False)

    fns = {
        SUPMOCO: lambda: supmoco_loss(e(slice(0, n)), labels, keys, queue, 0.1, key_owner=owner),
        MOCO: lambda: moco_loss(e(slice(0, n)), keys[:n], queue.embeddings, 0.1),
        SIMCLR: lambda: simclr_loss(e(slice(None)), two_view_pairs(n), 0.1),
        SUPCON: lambda: supcon_loss(e(slice(None)), np.tile([0, 1, 0, 2], 2), 0.1),
    }
    return fns, [t for layer in p.backbone for t in layer]


def test_gradients_match_finite_differences(criterion):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(20):
        fns, params = _loss_fns(seeded_rng(seed))
        for name, fn in fns.items():
            rep = finite_diff_check(fn, params, n_coords=100, rng=seeded_rng(seed, 1))
            worst, checked = max(worst, rep.max_rel_error), checked + rep.n_checked
    elapsed = time.perf_counter() - start
    criterion(1, worst <= 1e-4 and elapsed < 60, f"max rel err {worst:.2e} over {checked} coordinates, {elapsed:.1f} s")


# -- 2. oracles -----------------------------------------------------------------------


def test_losses_match_double_loop_oracles(criterion):
    worst = 0.0
    for seed in range(120):
        rng = np.random.default_rng(seed)
        n, d, K = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(0, 33))
        tau = float(rng.choice([0.05, 0.1, 0.5]))
        q, labels = unit(rng, n, d), rng.integers(-1, 4, n)
        owner = np.repeat(np.arange(n), rng.integers(1, 4, n))
        keys = unit(rng, owner.size, d)
        Q, Ql = unit(rng, K, d), rng.integers(-1, 4, K)
        got = supmoco_loss(q, labels, keys, QueueSnapshot(Q, Ql, np.arange(K)), tau, key_owner=owner).item()
        want = oracles.supmoco_batch(q.tolist(), labels.tolist(), keys.tolist(), owner.tolist(), Q.tolist(), Ql.tolist(), tau)
        worst = max(worst, abs(got - want))
        k1 = unit(rng, n, d)
        worst = max(worst, abs(moco_loss(q, k1, Q, tau).item() - oracles.moco_batch(q.tolist(), k1.tolist(), Q.tolist(), tau)))
        v = unit(rng, 2 * n, d)
        pairs = two_view_pairs(n)
        worst = max(worst, abs(simclr_loss(v, pairs, tau).item() - oracles.simclr(v.tolist(), pairs.tolist(), tau)))
        vl = np.tile(rng.integers(0, 3, n), 2)
        worst = max(worst, abs(supcon_loss(v, vl, tau).item() - oracles.supcon(v.tolist(), vl.tolist(), tau)))
    criterion(2, worst <= 1e-10, f"max abs diff {worst:.2e} on 120 configurations x 4 losses")


# -- 3. reductions ---------------------------------------------------------------------


def test_loss_reductions(criterion):
    w1 = w2 = 0.0
    for seed in range(50):
        rng = np.random.default_rng(10_000 + seed)
        n, d, K = int(rng.integers(1, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 33))
        q, k, Q = unit(rng, n, d), unit(rng, n, d), unit(rng, K, d)
        sup = supmoco_loss(q, np.arange(n), k, QueueSnapshot(Q, 100 + np.arange(K), np.arange(K)), 0.1, key_owner=np.arange(n))
        w1 = max(w1, abs(sup.item() - moco_loss(q, k, Q, 0.1).item()))
        e = unit(rng, 2 * n, d)
        w2 = max(w2, abs(supcon_loss(e, np.tile(np.arange(n), 2), 0.1).item() - simclr_loss(e, two_view_pairs(n), 0.1).item()))
    criterion(3, max(w1, w2) <= 1e-12, f"supmoco->moco {w1:.1e}, supcon->simclr {w2:.1e} on 50 cases each")


# -- 4. queue -------------------------------------------------------------------------


def test_queue_against_list_model(criterion):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(10_000):
        cap = int(rng.integers(1, 7))
        q, model = FeatureQueue(cap, 2), []
        for _ in range(int(rng.integers(1, 6))):
            m = int(rng.integers(0, 5))
            emb = unit(rng, m, 2)
            labels = rng.integers(-1, 3, m)
            q.enqueue(emb, labels)
            model = (model + list(zip(emb.tolist(), labels.tolist())))[-cap:]
        snap = q.snapshot()
        if snap.labels.tolist() != [lab for _, lab in model] or snap.embeddings.tolist() != [e for e, _ in model]:
            bad += 1
        for c in range(3):
            if np.any(snap.labels[q.positives_for(c)] == UNLABELED):
                bad += 1
    criterion(4, bad == 0, f"{bad} mismatches over 10000 random sequences")


# -- 5. routing -----------------------------------------------------------------------


def test_gradient_routing(criterion):
    ds = make_dataset(BENCHMARK_DATA, 0)
    enc = EncoderConfig(input_dim=BENCHMARK_DATA.input_dim, backbone_hidden=(32,), backbone_out=16, proj_hidden=32, proj_out=16)
    violations, steps = 0, 0
    for loss in (SUPMOCO, MOCO, SUPCON, SIMCLR):
        tr = Trainer(ds, TrainConfig(loss=loss, batch_size=16, queue_size=64, momentum=0.95), enc)
        for _ in range(10):
            before = [t.values.copy() for t in tr.pair.key.tensors()]
            old = tr.queue.snapshot()
            tr.train_step()
            steps += 1
            m = tr.pair.momentum
            for kb, tk, tq in zip(before, tr.pair.key.tensors(), tr.pair.query.tensors()):
                violations += tk.values.tobytes() != (m * kb + (1 - m) * tq.values).tobytes()
                violations += tk.grad is not None
            snap = tr.queue.snapshot()
            kept = np.isin(old.insert_seq, snap.insert_seq)
            idx = np.searchsorted(snap.insert_seq, old.insert_seq[kept])
            violations += snap.embeddings[idx].tobytes() != old.embeddings[kept].tobytes()
    criterion(5, violations == 0, f"{violations} violations over {steps} steps of 4 loss variants")


# -- benchmark trials shared by 6-9 and 12 -------------------------------------------

VARIANTS = {
    "supmoco": {},
    "moco": {"loss": MOCO},
    "labels10": {"labels": LabelSpec(0.1)},
    "labels0": {"labels": LabelSpec(0.0)},
    "p1": {"positives": 1},
    "pure": {"mixing": PURE},
}
_ELAPSED: dict[str, float] = {}


@lru_cache(maxsize=None)
def trials(name):
    start = time.perf_counter()
    out = [run_trial(s, with_collapse=name == "supmoco", **VARIANTS[name]) for s in SEEDS]
    _ELAPSED[name] = time.perf_counter() - start
    return out


def mean_acc(name):
    return 100 * float(np.mean([t.accuracy for t in trials(name)]))


def test_supmoco_beats_moco(criterion):
    sup, moco = mean_acc("supmoco"), mean_acc("moco")
    elapsed = _ELAPSED["supmoco"] + _ELAPSED["moco"]
    criterion(6, sup >= moco + 5 and elapsed < 300, f"SupMoCo {sup:.2f} vs MoCo {moco:.2f} (gap {sup - moco:+.2f}), {elapsed:.0f} s")


def test_semi_supervised_ordering(criterion):
    full, ten, zero = mean_acc("supmoco"), mean_acc("labels10"), mean_acc("labels0")
    ok = full >= ten >= zero and full - ten <= 5
    criterion(7, ok, f"100% {full:.2f} >= 10% {ten:.2f} >= 0% {zero:.2f}; 100%-10% gap {full - ten:.2f}")


def test_extra_positives_non_inferior(criterion):
    p3, p1 = mean_acc("supmoco"), mean_acc("p1")
    criterion(8, p3 >= p1 - 1, f"P=3 {p3:.2f} vs P=1 {p1:.2f} (P3-P1 {p3 - p1:+.2f})")


def test_impure_batches_non_inferior(criterion):
    impure, pure = mean_acc("supmoco"), mean_acc("pure")
    criterion(9, impure >= pure - 2, f"impure {impure:.2f} vs pure {pure:.2f} (impure-pure {impure - pure:+.2f})")


def test_collapse_beats_random_init(criterion):
    trained = [t.collapse for t in trials("supmoco")]
    rand = [collapse_fraction(random_params(s), make_dataset(BENCHMARK_DATA, s), s) for s in SEEDS]
    t, r = 100 * np.mean(trained), 100 * np.mean(rand)
    criterion(12, t >= r + 10, f">=1 same-class neighbour: trained {t:.1f}% vs random init {r:.1f}% ({t - r:+.1f})")


# -- 10. ranks -----------------------------------------------------------------------


def test_average_ranks_of_reported_grids(criterion):
    im = average_rank(as_table(IMAGENET_ONLY))
    al = average_rank(as_table(ALL_DATASETS))
    want = REPORTED_RANKS
    ok = (
        abs(im["SupMoCo"] - want["imagenet_only"]["SupMoCo"]) <= 0.25
        and abs(im["CrossTransformers"] - want["imagenet_only"]["CrossTransformers"]) <= 0.25
        and abs(al["SupMoCo"] - want["all_datasets"]["SupMoCo"]) <= 0.25
    )
    detail = f"grid 1: SupMoCo {im['SupMoCo']:.2f}, CrossTransformers {im['CrossTransformers']:.2f}; grid 2: SupMoCo {al['SupMoCo']:.2f}"
    criterion(10, ok, detail)


# -- 11. confidence interval -------------------------------------------------------------


def test_confidence_interval_formula(criterion):
    cases = [[0.5, 0.7], [0.2, 0.4, 0.9], [1.0, 1.0, 1.0, 0.0], [0.33] * 6]
    worst = 0.0
    for accs in cases:
        a = np.asarray(accs)
        worst = max(worst, abs(confidence_interval(accs) - 1.96 * a.std(ddof=1) / np.sqrt(a.size)))
    hand = confidence_interval([0.5, 0.7])
    ok = worst <= 1e-15 and abs(hand - 0.196) <= 1e-12 and confidence_interval([0.33] * 6) == 0.0
    criterion(11, ok, f"{{0.5, 0.7}} -> {hand:.6f}; max deviation {worst:.1e}")


# -- 13. determinism -------------------------------------------------------------------


def test_pipeline_and_resume_are_deterministic(criterion, tmp_path):
    outs = []
    for run in ("a", "b"):
        for cmd in ("generate", "train", "eval"):
            assert main([cmd, "--out", str(tmp_path / run), "--seed", "7"]) == 0
        outs.append((tmp_path / run / "results.csv").read_bytes())
    same_results = outs[0] == outs[1]

    ds = make_dataset(BENCHMARK_DATA, 1)
    cfg = TrainConfig(epochs=6, seed=1)
    full = Trainer(ds, cfg)
    full.run()
    half = Trainer(ds, cfg)
    half.run(cfg.total_steps // 2)
    save_checkpoint(tmp_path / "half.bin", half.checkpoint())
    resumed = Trainer.from_checkpoint(ds, load_checkpoint(tmp_path / "half.bin"))
    resumed.run()
    same_params = all(
        x.values.tobytes() == y.values.tobytes()
        for x, y in zip(full.pair.query.tensors() + full.pair.key.tensors(), resumed.pair.query.tensors() + resumed.pair.key.tensors())
    )
    criterion(13, same_results and same_params, f"results files identical: {same_results}; resumed params identical: {same_params}")
