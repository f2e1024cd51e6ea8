"""Proportional prioritized experience replay over a binary sum-tree."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    """One stored interaction; next_state is None exactly for terminal moves."""

    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray | None

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")

    @property
    def terminal(self) -> bool:
        return self.next_state is None


class SumTree:
    """Fixed-capacity sum-tree; leaves hold non-negative masses.

    Every write recomputes the ancestor path as left + right, so each internal
    node is exactly the sum of its children at all times (no drift from
    incremental deltas).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.nodes = np.zeros(2 * capacity - 1, dtype=np.float64)

    @property
    def total(self) -> float:
        return float(self.nodes[0])

    def leaf(self, index: int) -> float:
        return float(self.nodes[self.capacity - 1 + index])

    def leaves(self) -> np.ndarray:
        return self.nodes[self.capacity - 1:].copy()

    def set(self, index: int, mass: float) -> None:
        if not (0 <= index < self.capacity):
            raise IndexError(f"leaf {index} outside 0..{self.capacity - 1}")
        if mass < 0 or not np.isfinite(mass):
            raise ValueError(f"leaf mass must be finite and non-negative, got {mass}")
        node = self.capacity - 1 + index
        self.nodes[node] = mass
        while node > 0:
            node = (node - 1) // 2
            self.nodes[node] = self.nodes[2 * node + 1] + self.nodes[2 * node + 2]

    def find(self, mass: float) -> int:
        """Leaf index whose cumulative interval contains the given mass."""
        node = 0
        while node < self.capacity - 1:
            left = 2 * node + 1
            if mass <= self.nodes[left]:
                node = left
            else:
                mass -= self.nodes[left]
                node = left + 1
        return node - (self.capacity - 1)


@dataclass(frozen=True)
class SampleBatch:
    indices: np.ndarray
    transitions: list[Transition]
    weights: np.ndarray  # importance weights, max-normalized to (0, 1]


class ReplayBuffer:
    """Ring buffer with priority-proportional stratified sampling.

    Selection probability follows p_i^alpha / sum_k p_k^alpha; importance
    weights are (N * P(i))^-beta normalized by the batch maximum, with N the
    current fill size.
    """

    def __init__(
        self,
        capacity: int,
        alpha: float = 0.6,
        priority_eps: float = 1e-6,
        rng: np.random.Generator | None = None,
    ):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if alpha < 0:
            raise ValueError("alpha must be non-negative")
        self.capacity = capacity
        self.alpha = alpha
        self.priority_eps = priority_eps
        self.rng = rng or np.random.default_rng()
        self.tree = SumTree(capacity)
        self._storage: list[Transition | None] = [None] * capacity
        self._raw_priority = np.zeros(capacity, dtype=np.float64)
        self._write = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def raw_priority(self, index: int) -> float:
        return float(self._raw_priority[index])

    def push(self, tr: Transition) -> int:
        """Insert at the pool's current max raw priority (1.0 when empty)."""
        priority = float(self._raw_priority[: self._size].max()) if self._size else 1.0
        index = self._write
        self._storage[index] = tr
        self._raw_priority[index] = priority
        self.tree.set(index, priority**self.alpha)
        self._write = (self._write + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        return index

    def sample(self, k: int, beta: float) -> SampleBatch:
        """Stratified draw of k transitions; requires at least k stored."""
        if k < 1:
            raise ValueError("k must be positive")
        if self._size < k:
            raise ValueError(f"need at least {k} transitions, have {self._size}")
        if beta < 0:
            raise ValueError("beta must be non-negative")
        total = self.tree.total
        if total <= 0:
            raise ValueError("all priorities are zero; cannot sample")

        indices = np.empty(k, dtype=np.intp)
        probs = np.empty(k, dtype=np.float64)
        stratum = total / k
        for i in range(k):
            mass = self.rng.uniform(i * stratum, (i + 1) * stratum)
            idx = min(self.tree.find(min(mass, total)), self._size - 1)
            indices[i] = idx
            probs[i] = self.tree.leaf(idx) / total

        weights = (self._size * probs) ** (-beta)
        weights /= weights.max()
        transitions = [self._storage[i] for i in indices]
        return SampleBatch(indices=indices, transitions=transitions, weights=weights)

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        """Set raw priority to |td_error| + eps for each index."""
        if len(indices) != len(td_errors):
            raise ValueError("indices and td_errors must align")
        for idx, delta in zip(indices, td_errors):
            i = int(idx)
            if not (0 <= i < self._size):
                raise IndexError(f"index {i} outside the filled region")
            p = abs(float(delta)) + self.priority_eps
            self._raw_priority[i] = p
            self.tree.set(i, p**self.alpha)
