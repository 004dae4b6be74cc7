"""Labeled FIFO feature queue.

A fixed-capacity ring of unit embeddings and their class labels. Only the
``d``-dimensional embedding, an integer label and an insertion counter are
stored per slot, never the raw input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import ContractError

UNLABELED = -1
UNIT_TOL = 1e-9


@dataclass(frozen=True)
class QueueEntry:
    embedding: np.ndarray
    label: int
    insert_seq: int


@dataclass(frozen=True)
class QueueSnapshot:
    """Point-in-time copy of a queue, ordered oldest to newest."""

    embeddings: np.ndarray  # (size, d)
    labels: np.ndarray  # (size,)
    insert_seq: np.ndarray  # (size,)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "QueueSnapshot":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))

    def positives_for(self, label: int) -> np.ndarray:
        return _positives(self.labels, label)


def _positives(labels: np.ndarray, label: int) -> np.ndarray:
    if label == UNLABELED:
        raise ContractError("positives_for called with UNLABELED; skip the lookup for unlabeled queries")
    return np.flatnonzero(labels == label)


class FeatureQueue:
    def __init__(self, capacity: int, dim: int):
        if capacity <= 0 or dim <= 0:
            raise ValueError("capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._emb = np.zeros((self.capacity, self.dim))
        self._labels = np.full(self.capacity, UNLABELED, dtype=np.int64)
        self._seq = np.zeros(self.capacity, dtype=np.int64)
        self._head = 0  # slot of the oldest entry
        self._size = 0
        self._next_seq = 0

    def __len__(self) -> int:
        return self._size

    @property
    def next_seq(self) -> int:
        return self._next_seq

    def enqueue(self, embeddings, labels) -> None:
        """Append rows in order, evicting the oldest entries beyond capacity."""
        emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if emb.shape[1] != self.dim:
            raise ContractError(f"queue stores {self.dim}-dim embeddings, got {emb.shape[1]}")
        if labels.shape[0] != emb.shape[0]:
            raise ContractError("one label per embedding")
        norms = np.sqrt((emb * emb).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ContractError("queue entries must be unit norm")
        m = emb.shape[0]
        seq = self._next_seq + np.arange(m, dtype=np.int64)
        self._next_seq += m
        if m >= self.capacity:
            emb, labels, seq = emb[-self.capacity :], labels[-self.capacity :], seq[-self.capacity :]
            self._emb[:] = emb
            self._labels[:] = labels
            self._seq[:] = seq
            self._head, self._size = 0, self.capacity
            return
        tail = (self._head + self._size) % self.capacity
        slots = (tail + np.arange(m)) % self.capacity
        self._emb[slots] = emb
        self._labels[slots] = labels
        self._seq[slots] = seq
        overflow = max(0, self._size + m - self.capacity)
        self._head = (self._head + overflow) % self.capacity
        self._size = min(self.capacity, self._size + m)

    def enqueue_entries(self, entries: list[QueueEntry]) -> None:
        if not entries:
            return
        self.enqueue(np.stack([e.embedding for e in entries]), [e.label for e in entries])

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % self.capacity

    def snapshot(self) -> QueueSnapshot:
        idx = self._order()
        return QueueSnapshot(self._emb[idx].copy(), self._labels[idx].copy(), self._seq[idx].copy())

    def entries(self) -> list[QueueEntry]:
        s = self.snapshot()
        return [QueueEntry(e, int(l), int(q)) for e, l, q in zip(s.embeddings, s.labels, s.insert_seq)]

    def positives_for(self, label: int) -> np.ndarray:
        """Snapshot-order indices of entries carrying ``label``."""
        return _positives(self._labels[self._order()], label)

    def entry_nbytes(self) -> int:
        return self._emb.itemsize * self.dim + self._labels.itemsize + self._seq.itemsize

    def restore(self, snapshot: QueueSnapshot, next_seq: int) -> None:
        """Reset contents from ``snapshot`` (used when resuming a checkpoint)."""
        n = len(snapshot)
        if n > self.capacity or (n and snapshot.embeddings.shape[1] != self.dim):
            raise ContractError("snapshot does not fit this queue")
        self._emb[:n] = snapshot.embeddings
        self._labels[:n] = snapshot.labels
        self._seq[:n] = snapshot.insert_seq
        self._head, self._size = 0, n
        self._next_seq = int(next_seq)
