"""Grid encodings of link state and construction progress for the Q-networks.

Every channel is an n x n float64 matrix indexed by (node-1, node-1). Link
metrics are min-max normalized per snapshot and mirrored onto both (i,j) and
(j,i); construction marks are additive so revisits stack.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .topology import NliSnapshot, Topology

TREE_EDGE_MARK = 1.0  # added at both off-diagonal positions per traversal
POSITION_MARK = 0.5  # placed on the diagonal of the agent's current node
FORK_MARK = 1.0  # added on the diagonal per subgoal selection


def _minmax(values: np.ndarray) -> np.ndarray:
    lo = float(values.min())
    hi = float(values.max())
    if hi - lo <= 0.0:
        # flat metric carries no ranking information; park it mid-scale
        return np.full_like(values, 0.5)
    return (values - lo) / (hi - lo)


def normalized_edge_metrics(snap: NliSnapshot) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-edge min-max normalized (bw, delay, loss), each in [0, 1]."""
    return _minmax(snap.bw), _minmax(snap.delay), _minmax(snap.loss)


def _edge_matrix(topo: Topology, per_edge: np.ndarray) -> np.ndarray:
    n = topo.node_count
    mat = np.zeros((n, n), dtype=np.float64)
    for eid, e in enumerate(topo.edges):
        mat[e.i - 1, e.j - 1] = per_edge[eid]
        mat[e.j - 1, e.i - 1] = per_edge[eid]
    return mat


def encode_link_matrices(topo: Topology, snap: NliSnapshot) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized bandwidth / delay / loss channels; zeros off the link support."""
    bw_n, delay_n, loss_n = normalized_edge_metrics(snap)
    return _edge_matrix(topo, bw_n), _edge_matrix(topo, delay_n), _edge_matrix(topo, loss_n)


def encode_tree_state(topo: Topology, mark_counts: Mapping[int, int], position: int) -> np.ndarray:
    """Construction-progress channel: stacked edge marks plus the position dot.

    mark_counts maps edge id -> traversal count; the current node gets 0.5 on
    its diagonal cell (exactly one such cell).
    """
    n = topo.node_count
    if not (1 <= position <= n):
        raise ValueError(f"position {position} outside 1..{n}")
    mat = np.zeros((n, n), dtype=np.float64)
    for eid, count in mark_counts.items():
        if count <= 0:
            raise ValueError(f"edge {eid}: traversal count must be positive, got {count}")
        e = topo.edges[eid]
        mat[e.i - 1, e.j - 1] += TREE_EDGE_MARK * count
        mat[e.j - 1, e.i - 1] += TREE_EDGE_MARK * count
    mat[position - 1, position - 1] = POSITION_MARK
    return mat


def encode_goal_matrix(topo: Topology, fork_history: Sequence[int]) -> np.ndarray:
    """Subgoal channel: one diagonal increment per fork-node selection."""
    n = topo.node_count
    mat = np.zeros((n, n), dtype=np.float64)
    for g in fork_history:
        if not (1 <= g <= n):
            raise ValueError(f"fork node {g} outside 1..{n}")
        mat[g - 1, g - 1] += FORK_MARK
    return mat


def stack_states(*channels: np.ndarray) -> np.ndarray:
    """Stack channels into a (C, n, n) tensor, validating shape agreement."""
    if not channels:
        raise ValueError("need at least one channel")
    shape = channels[0].shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"channels must be square matrices, got {shape}")
    for ch in channels[1:]:
        if ch.shape != shape:
            raise ValueError(f"channel shape mismatch: {ch.shape} vs {shape}")
    return np.stack(channels).astype(np.float64, copy=False)
