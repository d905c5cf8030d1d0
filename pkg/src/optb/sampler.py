"""Selective batch sampling: every batch carries a fixed number of examples
from each class, derived from class weights."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

WEIGHT_SUM_TOL = 1e-9

Hook = Callable[[int, np.ndarray], np.ndarray]


class SamplerError(ValueError):
    pass


def apportion(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder rounding of ``weights * total`` to integers summing
    to ``total``; ties go to the lower class index."""
    quotas = [w * total for w in weights]
    # guard against 0.29 * 100 == 28.999999999999996
    counts = [math.floor(q + 1e-9) for q in quotas]
    shortfall = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:shortfall]:
        counts[i] += 1
    return counts


@dataclass(frozen=True)
class SamplerPlan:
    class_weights: tuple[float, ...]
    batch_size: int
    counts: tuple[int, ...]
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.class_weights)


def plan(class_weights: Sequence[float], batch_size: int, seed: int = 0) -> SamplerPlan:
    weights = tuple(float(w) for w in class_weights)
    if not weights:
        raise SamplerError("need at least one class weight")
    if batch_size < 1:
        raise SamplerError(f"batch size must be positive, got {batch_size}")
    for i, w in enumerate(weights):
        if not math.isfinite(w) or w < 0:
            raise SamplerError(f"class {i} has invalid weight {w}")
    if abs(math.fsum(weights) - 1.0) > WEIGHT_SUM_TOL:
        raise SamplerError(f"class weights sum to {math.fsum(weights)}, expected 1")
    return SamplerPlan(weights, batch_size, tuple(apportion(weights, batch_size)), seed)


def uniform_plan(n_classes: int, batch_size: int, seed: int = 0) -> SamplerPlan:
    return plan([1.0 / n_classes] * n_classes, batch_size, seed)


def parse_weights(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise SamplerError(f"cannot parse class weights {text!r}") from None


@dataclass
class ClassIndex:
    """Example indices grouped by class."""

    members: list[np.ndarray]

    @classmethod
    def from_labels(cls, labels: Sequence[int], n_classes: int | None = None) -> "ClassIndex":
        labels = np.asarray(labels, dtype=np.int64)
        if n_classes is None:
            n_classes = int(labels.max()) + 1 if labels.size else 0
        return cls([np.flatnonzero(labels == c) for c in range(n_classes)])

    @property
    def n_classes(self) -> int:
        return len(self.members)


@dataclass
class BatchSampler:
    """Stateful cursor over one training run's batch stream.

    Each class is drawn without replacement from a private shuffled order;
    when it runs out it is reshuffled and drawing continues.
    """

    plan: SamplerPlan
    index: ClassIndex
    hook: Hook | None = None
    _rng: np.random.Generator = field(init=False, repr=False)
    _orders: list = field(init=False, repr=False)
    _pos: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.index.n_classes != self.plan.n_classes:
            raise SamplerError(
                f"plan has {self.plan.n_classes} classes, index has {self.index.n_classes}"
            )
        for c, (count, members) in enumerate(zip(self.plan.counts, self.index.members)):
            if count > 0 and len(members) == 0:
                raise SamplerError(f"class {c} has no examples but needs {count} per batch")
        self._rng = np.random.default_rng(self.plan.seed)
        self._orders = [self._rng.permutation(m) for m in self.index.members]
        self._pos = [0] * self.plan.n_classes

    def _draw(self, c: int, k: int) -> list[int]:
        out = []
        while len(out) < k:
            order = self._orders[c]
            if self._pos[c] == len(order):
                self._orders[c] = order = self._rng.permutation(self.index.members[c])
                self._pos[c] = 0
            take = min(k - len(out), len(order) - self._pos[c])
            out.extend(int(v) for v in order[self._pos[c] : self._pos[c] + take])
            self._pos[c] += take
        return out

    def next_batch(self) -> list[tuple[int, int]]:
        """``(example_index, class)`` pairs, grouped by class in class order."""
        batch = []
        for c, count in enumerate(self.plan.counts):
            batch.extend((idx, c) for idx in self._draw(c, count))
        return batch

    def next_examples(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Draw a batch and gather its images, applying the per-class hook."""
        batch = self.next_batch()
        idx = np.fromiter((i for i, _ in batch), dtype=np.int64, count=len(batch))
        labels = np.fromiter((c for _, c in batch), dtype=np.int64, count=len(batch))
        picked = images[idx]
        if self.hook is not None:
            picked = np.stack([self.hook(int(c), img) for c, img in zip(labels, picked)])
        return picked, labels
