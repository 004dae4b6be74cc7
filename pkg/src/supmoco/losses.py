"""Contrastive objectives on the tape: MoCo, SimCLR, SupCon and SupMoCo.

All four are expressed as one primitive, :func:`supmoco.numcore.masked_nll`,
applied to a matrix of scaled cosine logits with a positive mask and a
denominator mask per anchor row:

=========  ========================================  ===================================
loss       denominator of anchor i                   positives of anchor i
=========  ========================================  ===================================
MoCo       its own key + every queue entry           its own key
SimCLR     every other batch embedding               its paired view
SupCon     every other batch embedding               every other same-label embedding
SupMoCo    its B_i keys + every queue entry          its B_i keys + same-label queue
=========  ========================================  ===================================

Keys and queue entries are constants: gradients only reach the query side.
UNLABELED queries match nothing in the queue and UNLABELED queue entries
match no query; such entries remain in every denominator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ContractError, Tensor, as_tensor, masked_nll, matmul, reshape, scale, transpose
from .queue import UNLABELED, QueueSnapshot


@dataclass(frozen=True)
class SimilarityConfig:
    temperature: float = 0.1

    def __post_init__(self):
        _check_tau(self.temperature)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    per_query: np.ndarray
    denominator_terms: np.ndarray


def _check_tau(tau: float) -> float:
    if not tau > 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return float(tau)


def _const(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _queue_arrays(queue, dim: int):
    if queue is None:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64)
    if isinstance(queue, QueueSnapshot):
        return queue.embeddings, queue.labels
    emb = _const(queue).reshape(-1, dim)
    return emb, np.full(emb.shape[0], UNLABELED, dtype=np.int64)


def scaled_cosine(u, v, tau: float = 0.1) -> float:
    """``(u . v) / tau`` for unit vectors ``u`` and ``v``."""
    return float(np.dot(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)) / _check_tau(tau))


def _finish(logits: Tensor, pos, den, breakdown: bool):
    loss, rows = masked_nll(logits, pos, den, per_row=True)
    if breakdown:
        return loss, LossBreakdown(loss.item(), rows, den.sum(axis=1))
    return loss


def supmoco_loss(
    queries,
    query_labels,
    keys,
    queue=None,
    tau: float = 0.1,
    key_owner=None,
    breakdown: bool = False,
):
    """Batch-mean SupMoCo loss.

    ``queries`` is a ``(n, d)`` tensor (or a single ``(d,)`` query) of unit
    embeddings from the query encoder. ``keys`` holds every in-batch key
    embedding; ``key_owner[j]`` is the query that key ``j`` belongs to, the
    query's own augmented view included (for a single query all keys belong
    to it). ``queue`` is a :class:`QueueSnapshot`, a bare ``(K, d)`` array
    (all entries unlabeled) or ``None``.
    """
    tau = _check_tau(tau)
    q = as_tensor(queries)
    single = q.values.ndim == 1
    d = q.shape[-1]
    n = 1 if single else q.shape[0]
    labels = np.atleast_1d(np.asarray(query_labels, dtype=np.int64))
    if labels.shape[0] != n:
        raise ContractError(f"{labels.shape[0]} labels for {n} queries")
    K_in = _const(keys).reshape(-1, d)
    owner = np.zeros(K_in.shape[0], dtype=np.int64) if key_owner is None else np.asarray(key_owner, dtype=np.int64)
    if owner.shape[0] != K_in.shape[0]:
        raise ContractError("key_owner must name one query per key")
    counts = np.bincount(owner, minlength=n)
    if counts.shape[0] > n or np.any(counts[:n] == 0):
        raise ContractError("every query needs at least one key (its own augmented view)")
    Q_emb, Q_lab = _queue_arrays(queue, d)

    columns = np.concatenate([K_in, Q_emb], axis=0)
    q2 = reshape(q, (1, d)) if single else q
    logits = scale(matmul(q2, Tensor(columns.T)), 1.0 / tau)

    own = owner[None, :] == np.arange(n)[:, None]
    labeled = labels != UNLABELED
    queue_pos = (Q_lab[None, :] == labels[:, None]) & labeled[:, None] & (Q_lab[None, :] != UNLABELED)
    pos = np.concatenate([own, queue_pos], axis=1)
    den = np.concatenate([own, np.ones((n, Q_emb.shape[0]), dtype=bool)], axis=1)
    return _finish(logits, pos, den, breakdown)


def moco_loss(queries, keys, queue=None, tau: float = 0.1, breakdown: bool = False):
    """Batch-mean MoCo InfoNCE: one key per query, every queue entry a negative."""
    q = as_tensor(queries)
    n = 1 if q.values.ndim == 1 else q.shape[0]
    q_emb, _ = _queue_arrays(queue, q.shape[-1])
    return supmoco_loss(
        q,
        np.full(n, UNLABELED),
        keys,
        q_emb,
        tau,
        key_owner=np.arange(n),
        breakdown=breakdown,
    )


def _in_batch_logits(embeddings: Tensor, tau: float) -> Tensor:
    return scale(matmul(embeddings, transpose(embeddings)), 1.0 / tau)


def simclr_loss(embeddings, pair_of, tau: float = 0.1, breakdown: bool = False):
    """Mean over all ``2n`` anchors of the NT-Xent loss.

    ``pair_of[i]`` is the index of the other view of anchor ``i``; it must be
    an involution without fixed points.
    """
    tau = _check_tau(tau)
    e = as_tensor(embeddings)
    m = e.shape[0]
    pair_of = np.asarray(pair_of, dtype=np.int64)
    if m < 2 or pair_of.shape != (m,):
        raise ContractError("simclr_loss needs n >= 1 pairs and one partner per embedding")
    idx = np.arange(m)
    if np.any(pair_of == idx) or np.any(pair_of[pair_of] != idx):
        raise ContractError("pair_of must be an involution without fixed points")
    den = ~np.eye(m, dtype=bool)
    pos = np.zeros((m, m), dtype=bool)
    pos[idx, pair_of] = True
    return _finish(_in_batch_logits(e, tau), pos, den, breakdown)


def supcon_loss(embeddings, labels, tau: float = 0.1, breakdown: bool = False):
    """Mean over anchors of the supervised contrastive loss.

    Every other embedding with the same label is a positive; all other
    embeddings form the denominator.
    """
    tau = _check_tau(tau)
    e = as_tensor(embeddings)
    m = e.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ContractError(f"{labels.shape[0]} labels for {m} embeddings")
    den = ~np.eye(m, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & den
    if not pos.any(axis=1).all():
        raise ContractError("every anchor needs at least one positive")
    return _finish(_in_batch_logits(e, tau), pos, den, breakdown)


def two_view_pairs(n: int) -> np.ndarray:
    """``pair_of`` for embeddings stacked as ``[view_a (n rows); view_b (n rows)]``."""
    idx = np.arange(n)
    return np.concatenate([idx + n, idx])
