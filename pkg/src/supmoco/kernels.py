"""Hot numeric kernels with a numba path and a numpy path.

Every kernel has a ``*_numpy`` and a ``*_numba`` implementation with the
same signature; the public name is bound to one of them at import time
according to :data:`supmoco._jit.USE_JIT`. Both paths are always importable
so tests and ``benchmarks/bench_kernels.py`` can compare them.
"""

import numpy as np

from ._jit import USE_JIT, njit

__all__ = [
    "masked_nll",
    "topk_rows",
    "collapse_counts",
    "USE_JIT",
]


# ---------------------------------------------------------------------------
# Masked multi-positive negative log-likelihood
# ---------------------------------------------------------------------------


def masked_nll_numpy(logits, pos, den):
    """Per-row multi-positive softmax NLL and its gradient w.r.t. ``logits``.

    For row ``i`` with denominator set ``D_i = {j: den[i, j]}`` and positive
    set ``P_i = {j: pos[i, j]}`` (``P_i`` must be a nonempty subset of
    ``D_i``)::

        loss_i = logsumexp_{j in D_i} logits[i, j] - mean_{j in P_i} logits[i, j]
        grad_ij = softmax_{D_i}(logits[i])_j - [j in P_i] / |P_i|

    Columns outside ``D_i`` get zero gradient. The log-sum-exp subtracts the
    row maximum over ``D_i``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    masked = np.where(den, logits, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.where(den, np.exp(masked - mx), 0.0)
    s = e.sum(axis=1, keepdims=True)
    npos = pos.sum(axis=1, keepdims=True).astype(np.float64)
    lse = mx[:, 0] + np.log(s[:, 0])
    pos_mean = np.where(pos, logits, 0.0).sum(axis=1) / npos[:, 0]
    loss = lse - pos_mean
    grad = e / s - pos / npos
    return loss, grad


@njit
def masked_nll_numba(logits, pos, den):
    n, m = logits.shape
    loss = np.empty(n)
    grad = np.zeros((n, m))
    for i in range(n):
        mx = -np.inf
        for j in range(m):
            if den[i, j] and logits[i, j] > mx:
                mx = logits[i, j]
        s = 0.0
        for j in range(m):
            if den[i, j]:
                ej = np.exp(logits[i, j] - mx)
                grad[i, j] = ej
                s += ej
        npos = 0
        psum = 0.0
        for j in range(m):
            if pos[i, j]:
                npos += 1
                psum += logits[i, j]
        loss[i] = mx + np.log(s) - psum / npos
        inv = 1.0 / npos
        for j in range(m):
            if den[i, j]:
                grad[i, j] = grad[i, j] / s
            if pos[i, j]:
                grad[i, j] -= inv
    return loss, grad


# ---------------------------------------------------------------------------
# Top-k selection with lower-index tie breaking
# ---------------------------------------------------------------------------


def topk_rows_numpy(sim, exclude, k):
    """Indices of the ``k`` largest entries per row of ``sim``.

    ``exclude[i]`` names a column never returned for row ``i`` (use -1 for
    none). Equal values are ordered by ascending column index.
    """
    sim = np.array(sim, dtype=np.float64, copy=True)
    rows = np.arange(sim.shape[0])
    valid = exclude >= 0
    sim[rows[valid], exclude[valid]] = -np.inf
    order = np.argsort(-sim, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :k]).astype(np.int64)


@njit
def topk_rows_numba(sim, exclude, k):
    q, n = sim.shape
    out = np.empty((q, k), dtype=np.int64)
    vals = np.empty(k)
    for i in range(q):
        filled = 0
        for j in range(n):
            if j == exclude[i]:
                continue
            v = sim[i, j]
            if filled == k and not v > vals[k - 1]:
                continue
            # insertion point: after every kept value >= v
            pos = filled if filled < k else k - 1
            while pos > 0 and vals[pos - 1] < v:
                if pos < k:
                    vals[pos] = vals[pos - 1]
                    out[i, pos] = out[i, pos - 1]
                pos -= 1
            vals[pos] = v
            out[i, pos] = j
            if filled < k:
                filled += 1
    return out


# ---------------------------------------------------------------------------
# Supervision-collapse neighbour counts
# ---------------------------------------------------------------------------


def collapse_counts_numpy(neighbors, labels, is_train, query_labels):
    """Per-query counts: same-class neighbours, train neighbours, and the
    size of the largest group of neighbours sharing one train class."""
    nl = labels[neighbors]
    nt = is_train[neighbors]
    same = (nl == query_labels[:, None]).sum(axis=1)
    from_train = nt.sum(axis=1)
    pair = (nl[:, :, None] == nl[:, None, :]) & nt[:, :, None] & nt[:, None, :]
    max_group = pair.sum(axis=2).max(axis=1)
    return same.astype(np.int64), from_train.astype(np.int64), max_group.astype(np.int64)


@njit
def collapse_counts_numba(neighbors, labels, is_train, query_labels):
    q, k = neighbors.shape
    same = np.zeros(q, dtype=np.int64)
    from_train = np.zeros(q, dtype=np.int64)
    max_group = np.zeros(q, dtype=np.int64)
    for i in range(q):
        best = 0
        for a in range(k):
            na = neighbors[i, a]
            if labels[na] == query_labels[i]:
                same[i] += 1
            if is_train[na]:
                from_train[i] += 1
                c = 0
                for b in range(k):
                    nb = neighbors[i, b]
                    if is_train[nb] and labels[nb] == labels[na]:
                        c += 1
                if c > best:
                    best = c
        max_group[i] = best
    return same, from_train, max_group


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _prep_bool(a):
    return np.ascontiguousarray(a, dtype=np.bool_)


def masked_nll(logits, pos, den):
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    pos = _prep_bool(pos)
    den = _prep_bool(den)
    if USE_JIT:
        return masked_nll_numba(logits, pos, den)
    return masked_nll_numpy(logits, pos, den)


def topk_rows(sim, exclude, k):
    sim = np.ascontiguousarray(sim, dtype=np.float64)
    exclude = np.ascontiguousarray(exclude, dtype=np.int64)
    if USE_JIT:
        return topk_rows_numba(sim, exclude, int(k))
    return topk_rows_numpy(sim, exclude, int(k))


def collapse_counts(neighbors, labels, is_train, query_labels):
    args = (
        np.ascontiguousarray(neighbors, dtype=np.int64),
        np.ascontiguousarray(labels, dtype=np.int64),
        _prep_bool(is_train),
        np.ascontiguousarray(query_labels, dtype=np.int64),
    )
    if USE_JIT:
        return collapse_counts_numba(*args)
    return collapse_counts_numpy(*args)
