"""Experience replay: uniform ring buffer and proportional prioritized replay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class SumTree:
    """Binary tree over ``capacity`` leaves storing priorities and their sums."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self._size = size
        self._tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self._tree[1])

    def get(self, index: int) -> float:
        return float(self._tree[self._size + index])

    def set(self, index: int, value: float) -> None:
        if not 0 <= index < self.capacity:
            raise IndexError(index)
        i = self._size + index
        self._tree[i] = value
        i //= 2
        while i >= 1:
            self._tree[i] = self._tree[2 * i] + self._tree[2 * i + 1]
            i //= 2

    def find(self, mass: float) -> int:
        """Leaf whose cumulative-priority interval contains ``mass``."""
        i = 1
        while i < self._size:
            left = self._tree[2 * i]
            if mass < left or self._tree[2 * i + 1] <= 0.0:
                i = 2 * i
            else:
                mass -= left
                i = 2 * i + 1
        return min(i - self._size, self.capacity - 1)

    def clear(self) -> None:
        self._tree[:] = 0.0


@dataclass
class Sample:
    items: list
    indices: np.ndarray
    weights: np.ndarray


class ReplayBuffer:
    """Fixed-capacity FIFO buffer with uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Any] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, item) -> int:
        if len(self._items) < self.capacity:
            self._items.append(item)
            idx = len(self._items) - 1
        else:
            idx = self._next
            self._items[idx] = item
        self._next = (idx + 1) % self.capacity
        return idx

    def sample(self, batch_size: int, rng: np.random.Generator) -> Sample:
        if not self._items:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, len(self._items), size=batch_size)
        return Sample([self._items[i] for i in idx], idx, np.ones(batch_size))

    def update_priorities(self, indices, td_errors) -> None:
        pass

    def clear(self) -> None:
        self._items.clear()
        self._next = 0


class PrioritizedReplayBuffer(ReplayBuffer):
    """Proportional prioritization: ``P(i) ~ p_i^alpha`` with ``p_i = |delta_i| + eps``.

    New items enter at the current maximum priority. Importance weights
    ``(N * P(i))^-beta`` are normalised by their maximum over the batch.
    """

    def __init__(self, capacity: int = 10_000, alpha: float = 0.6, beta: float = 0.4, eps: float = 1e-6):
        super().__init__(capacity)
        self.alpha, self.beta, self.eps = alpha, beta, eps
        self._tree = SumTree(capacity)
        self._max_priority = 1.0

    def add(self, item) -> int:
        idx = super().add(item)
        self._tree.set(idx, self._max_priority ** self.alpha)
        return idx

    def priority(self, index: int) -> float:
        """Stored (un-exponentiated) priority of an item."""
        return self._tree.get(index) ** (1.0 / self.alpha) if self.alpha else 1.0

    def sample(self, batch_size: int, rng: np.random.Generator) -> Sample:
        n = len(self._items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self._tree.total
        # stratified: one draw per equal slice of the priority mass
        bounds = np.arange(batch_size) * (total / batch_size)
        masses = bounds + rng.random(batch_size) * (total / batch_size)
        idx = np.array([self._tree.find(float(m)) for m in masses], dtype=np.int64)
        probs = np.array([self._tree.get(int(i)) for i in idx]) / total
        weights = (n * probs) ** (-self.beta)
        weights /= weights.max()
        return Sample([self._items[i] for i in idx], idx, weights)

    def update_priorities(self, indices, td_errors) -> None:
        for i, d in zip(np.asarray(indices), np.asarray(td_errors, dtype=np.float64)):
            p = abs(float(d)) + self.eps
            self._max_priority = max(self._max_priority, p)
            self._tree.set(int(i), p ** self.alpha)

    def clear(self) -> None:
        super().clear()
        self._tree.clear()
        self._max_priority = 1.0
