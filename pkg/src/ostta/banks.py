"""Bounded feature banks of reliable samples and brute-force kNN over them."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from functools import cached_property
from itertools import count
from typing import NamedTuple

import numpy as np

UNDESIRED_BANK_SIZE = 64


class Neighbor(NamedTuple):
    feature: np.ndarray
    similarity: float
    label: int | None


@dataclass(frozen=True)
class NeighborSet:
    neighbors: tuple[Neighbor, ...] = ()

    def __len__(self) -> int:
        return len(self.neighbors)

    def __iter__(self):
        return iter(self.neighbors)

    @cached_property
    def _stacked(self) -> np.ndarray:
        if not self.neighbors:
            return np.empty((0, 0))
        return np.stack([n.feature for n in self.neighbors])

    def features(self) -> np.ndarray:
        return self._stacked

    def labels(self) -> list[int | None]:
        return [n.label for n in self.neighbors]


class _Entry(NamedTuple):
    seq: int
    feature: np.ndarray
    label: int | None


def _snapshot(f: np.ndarray) -> np.ndarray:
    out = np.array(f, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


class DesiredBank:
    """One FIFO queue of capacity ``k`` per desired class, keyed by pseudo-label."""

    def __init__(self, num_classes: int, k: int):
        if num_classes < 1 or k < 0:
            raise ValueError("num_classes must be >= 1 and k >= 0")
        self.num_classes = num_classes
        self.k = k
        self._queues: list[deque[_Entry]] = [deque(maxlen=k) for _ in range(num_classes)]
        self._seq = count()

    @property
    def capacity(self) -> int:
        return self.num_classes * self.k

    def push(self, f: np.ndarray, y_hat: int) -> None:
        if not 0 <= y_hat < self.num_classes:
            raise IndexError(f"class index {y_hat} out of range")
        if self.k == 0:
            return
        self._queues[y_hat].append(_Entry(next(self._seq), _snapshot(f), int(y_hat)))

    def queue(self, c: int) -> list[np.ndarray]:
        return [e.feature for e in self._queues[c]]

    def entries(self) -> list[_Entry]:
        return [e for q in self._queues for e in q]

    def __len__(self) -> int:
        return sum(len(q) for q in self._queues)


class UndesiredBank:
    """Global FIFO of reliable undesired features."""

    def __init__(self, capacity: int = UNDESIRED_BANK_SIZE):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self._queue: deque[_Entry] = deque(maxlen=capacity)
        self._seq = count()

    def push(self, f: np.ndarray) -> None:
        if self.capacity == 0:
            return
        self._queue.append(_Entry(next(self._seq), _snapshot(f), None))

    def entries(self) -> list[_Entry]:
        return list(self._queue)

    def __len__(self) -> int:
        return len(self._queue)


def push_desired(bank: DesiredBank, f: np.ndarray, y_hat: int) -> None:
    bank.push(f, y_hat)


def push_undesired(bank: UndesiredBank, f: np.ndarray) -> None:
    bank.push(f)


def knn(f: np.ndarray, bank: DesiredBank | UndesiredBank, k: int) -> NeighborSet:
    """The ``min(k, len(bank))`` stored features most cosine-similar to ``f``.

    Ordered by similarity, descending; equal similarities put the more
    recently inserted entry first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    entries = bank.entries()
    if not entries:
        return NeighborSet()
    feats = np.stack([e.feature for e in entries])
    sims = feats @ f
    seqs = np.array([e.seq for e in entries])
    # lexsort: last key is primary
    order = np.lexsort((-seqs, -sims))[:k]
    return NeighborSet(tuple(Neighbor(entries[i].feature, float(sims[i]), entries[i].label) for i in order))


def capacity_floats(num_classes: int, k: int, n_u: int, dim: int) -> int:
    """Floats held by both banks when full: (|C_d| * K + |M_u|) * F."""
    if min(num_classes, k, n_u, dim) < 1:
        raise ValueError("all arguments must be positive")
    return (num_classes * k + n_u) * dim
