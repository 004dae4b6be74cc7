"""Naive reference evaluations of the contrastive losses.

Plain Python loops over lists of floats, written term by term from the loss
definitions. They share no code with :mod:`supmoco.losses` (no masks, no
kernels, no numpy) and exist to cross-check it.
"""

import math

UNLABELED = -1


def _dot(u, v):
    s = 0.0
    for a, b in zip(u, v):
        s += a * b
    return s


def _logsumexp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def moco(query, key, queue, tau):
    pos = _dot(query, key) / tau
    terms = [pos] + [_dot(query, e) / tau for e in queue]
    return -(pos - _logsumexp(terms))


def simclr(embeddings, pair_of, tau):
    m = len(embeddings)
    total = 0.0
    for i in range(m):
        den = [_dot(embeddings[i], embeddings[k]) / tau for k in range(m) if k != i]
        num = _dot(embeddings[i], embeddings[pair_of[i]]) / tau
        total += -(num - _logsumexp(den))
    return total / m


def supcon(embeddings, labels, tau):
    m = len(embeddings)
    total = 0.0
    for i in range(m):
        den = [_dot(embeddings[i], embeddings[k]) / tau for k in range(m) if k != i]
        lse = _logsumexp(den)
        positives = [r for r in range(m) if r != i and labels[r] == labels[i]]
        acc = 0.0
        for r in positives:
            acc += _dot(embeddings[i], embeddings[r]) / tau - lse
        total += -acc / len(positives)
    return total / m


def supmoco(query, label, keys, queue, queue_labels, tau):
    """One query: ``keys`` are its B_i in-batch positives (self view first)."""
    key_s = [_dot(query, k) / tau for k in keys]
    queue_s = [_dot(query, e) / tau for e in queue]
    lse = _logsumexp(key_s + queue_s)
    acc = 0.0
    count = 0
    for s in key_s:
        acc += s - lse
        count += 1
    if label != UNLABELED:
        for s, lab in zip(queue_s, queue_labels):
            if lab == label:
                acc += s - lse
                count += 1
    return -acc / count


def supmoco_batch(queries, labels, keys, key_owner, queue, queue_labels, tau):
    total = 0.0
    for i, q in enumerate(queries):
        mine = [k for k, o in zip(keys, key_owner) if o == i]
        total += supmoco(q, labels[i], mine, queue, queue_labels, tau)
    return total / len(queries)


def moco_batch(queries, keys, queue, tau):
    return sum(moco(q, k, queue, tau) for q, k in zip(queries, keys)) / len(queries)
