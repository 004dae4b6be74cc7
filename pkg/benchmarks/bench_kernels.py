"""Time the numba and numpy paths of each kernel on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

The first numba call (compilation, or loading the on-disk cache) is
excluded from the timings.
"""

import argparse
import time

import numpy as np

from supmoco import _jit, kernels


def _masks(rng, n, m):
    den = np.ones((n, m), dtype=bool)
    pos = rng.random((n, m)) < 0.05
    pos[:, 0] = True
    return pos, den


def cases(rng):
    # one training step: 32 queries against 96 keys plus a 1024-entry queue
    logits = rng.standard_normal((32, 96 + 1024)) * 10
    pos, den = _masks(rng, *logits.shape)
    # one retrieval pass: 200 queries over a 2400-item corpus
    sim = rng.standard_normal((200, 2400))
    exclude = rng.integers(0, 2400, 200)
    labels = rng.integers(0, 120, 2400)
    nb = rng.integers(0, 2400, (200, 9))
    return {
        "masked_nll": ((logits, pos, den), kernels.masked_nll_numpy, kernels.masked_nll_numba),
        "topk_rows": ((sim, exclude, 9), kernels.topk_rows_numpy, kernels.topk_rows_numba),
        "collapse_counts": (
            (nb, labels, labels < 80, rng.integers(80, 120, 200)),
            kernels.collapse_counts_numpy,
            kernels.collapse_counts_numba,
        ),
    }


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _jit.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"active path: {'numba' if kernels.USE_JIT else 'numpy'}")
    print(f"{'kernel':<16} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (inputs, np_fn, nb_fn) in cases(np.random.default_rng(args.seed)).items():
        nb_fn(*inputs)  # warm up
        a = np_fn(*inputs)
        b = nb_fn(*inputs)
        for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.allclose(x, y, rtol=1e-12, atol=1e-12), name
        t_np = best_of(np_fn, inputs, args.repeat)
        t_nb = best_of(nb_fn, inputs, args.repeat)
        print(f"{name:<16} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
