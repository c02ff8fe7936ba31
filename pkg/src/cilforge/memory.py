"""Exemplar memory: quotas, herding selection and rehearsal sets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datastream import Dataset

log = logging.getLogger(__name__)


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryPolicy:
    fixed_memory: bool = False
    memory_size: int = 2000
    memory_per_class: int = 20

    def governing(self) -> str:
        return "memory_per_class" if self.fixed_memory else "memory_size"


def quota(policy: MemoryPolicy, K: int) -> int:
    """Exemplars kept per class once ``K`` classes have been seen."""
    if K < 1:
        raise ValueError("seen-class count must be >= 1")
    if policy.fixed_memory:
        return policy.memory_per_class
    if policy.memory_size < K:
        log.warning("memory_size=%d is below the %d seen classes; storing no exemplars",
                    policy.memory_size, K)
    return policy.memory_size // K


def _normalize(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms == 0, 1.0, norms)


TIE_TOL = 1e-12


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy herding on L2-normalized features.

    Step k picks the unused row minimizing ``||mu - (S + x) / k||`` where ``mu``
    is the mean normalized feature and ``S`` the running sum of picks.  Ties
    (within ``TIE_TOL``) go to the lowest index.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= m <= n:
        raise SelectionError(f"cannot select {m} exemplars from {n} samples")
    f = _normalize(features)
    mu = f.mean(axis=0)
    running = np.zeros_like(mu)
    picked: list[int] = []
    available = np.ones(n, dtype=bool)
    for k in range(1, m + 1):
        dist = np.linalg.norm(mu[None] - (running[None] + f) / k, axis=1)
        dist[~available] = np.inf
        # distances within TIE_TOL of the minimum count as ties -> lowest index
        i = int(np.flatnonzero(dist <= dist.min() + TIE_TOL)[0])
        picked.append(i)
        available[i] = False
        running += f[i]
    return picked


@dataclass
class ExemplarStore:
    """Per-class exemplars in herding order.

    ``accesses`` counts every read or write from a learner; exemplar-free
    learners must leave it at zero.
    """

    per_class: dict[int, np.ndarray] = field(default_factory=dict)  # class -> source indices
    x: dict[int, np.ndarray] = field(default_factory=dict)
    accesses: int = 0

    def _touch(self) -> None:
        self.accesses += 1

    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def count(self, c: int) -> int:
        return len(self.per_class.get(c, ()))

    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def add_class(self, c: int, source: Dataset, order: list[int]) -> None:
        self._touch()
        order = np.asarray(order, dtype=np.int64)
        self.per_class[c] = source.index[order].copy()
        self.x[c] = source.x[order].copy()

    def reduce(self, new_quota: int) -> ExemplarStore:
        return reduce_exemplars(self, new_quota)

    def as_dataset(self, num_classes: int) -> Dataset:
        self._touch()
        cs = self.classes()
        if not cs or self.total() == 0:
            return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), num_classes,
                           np.zeros(0, dtype=np.int64))
        xs = np.concatenate([self.x[c] for c in cs])
        ys = np.concatenate([np.full(len(self.per_class[c]), c) for c in cs])
        idx = np.concatenate([self.per_class[c] for c in cs])
        return Dataset(xs, ys, num_classes, idx)

    def __getstate__(self):
        # features/inputs are recomputed from the source dataset on load
        return {"per_class": self.per_class, "accesses": self.accesses}

    def __setstate__(self, state):
        self.per_class = state["per_class"]
        self.accesses = state["accesses"]
        self.x = {}

    def restore_inputs(self, source: Dataset) -> None:
        """Refill stored inputs from their source indices after unpickling."""
        pos = {int(i): k for k, i in enumerate(source.index)}
        self.x = {c: source.x[[pos[int(i)] for i in idx]] if len(idx) else
                  np.zeros((0, source.dim)) for c, idx in self.per_class.items()}


def reduce_exemplars(store: ExemplarStore, new_quota: int) -> ExemplarStore:
    """Keep each class's first ``new_quota`` herding picks."""
    store._touch()
    for c in store.classes():
        store.per_class[c] = store.per_class[c][:new_quota]
        if c in store.x:
            store.x[c] = store.x[c][:new_quota]
    return store


def rehearsal_dataset(store: ExemplarStore, current: Dataset) -> Dataset:
    """Current-task examples plus every stored exemplar (global labels)."""
    mem = store.as_dataset(current.num_classes)
    if len(mem) == 0:
        return current
    return Dataset(np.concatenate([current.x, mem.x]), np.concatenate([current.y, mem.y]),
                   current.num_classes, np.concatenate([current.index, mem.index]))


def build_exemplars(store: ExemplarStore, policy: MemoryPolicy, new_data: Dataset,
                    new_classes, extract, total_classes: int) -> int:
    """Shrink old classes to the new quota and herd exemplars for ``new_classes``.

    ``extract`` maps an input array to features (the post-task model).
    Returns the per-class quota applied.
    """
    m = quota(policy, total_classes)
    reduce_exemplars(store, m)
    for c in new_classes:
        cls = new_data.select_classes([c])
        if len(cls) == 0:
            continue
        k = min(m, len(cls))
        order = herding_select(extract(cls.x), k) if k > 0 else []
        store.add_class(int(c), cls, order)
    return m
