"""Undirected network topology, per-edge link-state snapshots, and multicast trees.

Node ids are 1-based. Edges are undirected and stored canonically as
(min(i,j), max(i,j)); edge ids are indices into the lexicographically sorted
edge list. All public types are immutable after construction.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    """Raised for malformed topology definitions or files."""


class SnapshotError(ValueError):
    """Raised for snapshot records that violate the metric domains."""


class TreeError(ValueError):
    """Raised when an edge set cannot be interpreted as a multicast tree."""


@dataclass(frozen=True)
class EdgeDef:
    """One undirected link: canonical endpoints plus static attributes."""

    i: int
    j: int
    capacity: float  # Mbit/s
    base_delay: float  # ms


class Topology:
    """Connected undirected graph with canonical edge ids and sorted adjacency.

    Adjacency lists are ordered by ascending neighbour id; that order defines
    the per-node action-slot layout used everywhere else, so it must never
    depend on construction order.
    """

    def __init__(self, node_count: int, edges: Iterable[tuple[int, int, float, float]]):
        if node_count < 2:
            raise TopologyError(f"need at least 2 nodes, got {node_count}")
        canon: dict[tuple[int, int], tuple[float, float]] = {}
        for i, j, cap, delay in edges:
            if not (1 <= i <= node_count and 1 <= j <= node_count):
                raise TopologyError(f"edge ({i},{j}) references a node outside 1..{node_count}")
            if i == j:
                raise TopologyError(f"self-loop on node {i}")
            key = (min(i, j), max(i, j))
            if key in canon:
                raise TopologyError(f"duplicate edge ({key[0]},{key[1]})")
            if cap <= 0:
                raise TopologyError(f"edge ({i},{j}): capacity must be positive, got {cap}")
            if delay < 0:
                raise TopologyError(f"edge ({i},{j}): base delay must be non-negative, got {delay}")
            canon[key] = (float(cap), float(delay))
        if not canon:
            raise TopologyError("no edges")

        self.node_count = node_count
        self.edges: tuple[EdgeDef, ...] = tuple(
            EdgeDef(i, j, cap, delay) for (i, j), (cap, delay) in sorted(canon.items())
        )
        self.edge_count = len(self.edges)
        self._edge_index = {(e.i, e.j): k for k, e in enumerate(self.edges)}

        adj: list[list[tuple[int, int]]] = [[] for _ in range(node_count)]
        for k, e in enumerate(self.edges):
            adj[e.i - 1].append((e.j, k))
            adj[e.j - 1].append((e.i, k))
        self._adjacency = tuple(tuple(sorted(lst)) for lst in adj)
        self.max_degree = max(len(a) for a in self._adjacency)

        self._check_connected()

    def _check_connected(self) -> None:
        seen = {1}
        stack = [1]
        while stack:
            u = stack.pop()
            for v, _ in self._adjacency[u - 1]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        if len(seen) != self.node_count:
            missing = sorted(set(range(1, self.node_count + 1)) - seen)
            raise TopologyError(f"graph is not connected; unreachable nodes: {missing}")

    def neighbors(self, node: int) -> tuple[tuple[int, int], ...]:
        """(neighbour, edge_id) pairs in ascending neighbour order."""
        return self._adjacency[node - 1]

    def degree(self, node: int) -> int:
        return len(self._adjacency[node - 1])

    def edge_id(self, i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        try:
            return self._edge_index[key]
        except KeyError:
            raise TopologyError(f"no edge between {i} and {j}") from None

    def has_edge(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self._edge_index

    def endpoints(self, edge_id: int) -> tuple[int, int]:
        e = self.edges[edge_id]
        return e.i, e.j

    def other_end(self, edge_id: int, node: int) -> int:
        e = self.edges[edge_id]
        if node == e.i:
            return e.j
        if node == e.j:
            return e.i
        raise TopologyError(f"node {node} is not an endpoint of edge {edge_id}")

    @property
    def capacities(self) -> np.ndarray:
        return np.array([e.capacity for e in self.edges], dtype=np.float64)

    @property
    def base_delays(self) -> np.ndarray:
        return np.array([e.base_delay for e in self.edges], dtype=np.float64)

    def hash_hex(self) -> str:
        """Stable 12-hex-digit digest of the canonical edge list."""
        parts = [f"nodes {self.node_count}"]
        parts += [f"{e.i} {e.j} {e.capacity:.6f} {e.base_delay:.6f}" for e in self.edges]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:12]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return self.node_count == other.node_count and self.edges == other.edges

    def __repr__(self) -> str:
        return f"Topology(n={self.node_count}, m={self.edge_count}, max_degree={self.max_degree})"


def parse_topology(lines: Iterable[str], origin: str = "<string>") -> Topology:
    """Parse the line-oriented topology format.

    Format: optional '#' comment lines, a header 'nodes <n>', then one
    'i j capacity_mbps base_delay_ms' line per undirected edge.
    """
    header: int | None = None
    edges: list[tuple[int, int, float, float]] = []
    for ln, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if header is None:
            if len(fields) != 2 or fields[0] != "nodes":
                raise TopologyError(f"{origin}:{ln}: expected header 'nodes <n>', got {line!r}")
            try:
                header = int(fields[1])
            except ValueError:
                raise TopologyError(f"{origin}:{ln}: bad node count {fields[1]!r}") from None
            continue
        if len(fields) != 4:
            raise TopologyError(f"{origin}:{ln}: expected 'i j capacity delay', got {line!r}")
        try:
            i, j = int(fields[0]), int(fields[1])
            cap, delay = float(fields[2]), float(fields[3])
        except ValueError:
            raise TopologyError(f"{origin}:{ln}: unparsable edge line {line!r}") from None
        edges.append((i, j, cap, delay))
    if header is None:
        raise TopologyError(f"{origin}: missing 'nodes <n>' header")
    return Topology(header, edges)


def load_topology(path: str) -> Topology:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_topology(fh, origin=path)


def format_topology(topo: Topology) -> str:
    lines = [f"nodes {topo.node_count}"]
    lines += [f"{e.i} {e.j} {e.capacity:.6f} {e.base_delay:.6f}" for e in topo.edges]
    return "\n".join(lines) + "\n"


def save_topology(path: str, topo: Topology) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_topology(topo))


# ---------------------------------------------------------------------------
# Link-state snapshots


def _as_metric_array(values: Sequence[float] | np.ndarray, m: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != (m,):
        raise SnapshotError(f"{name}: expected shape ({m},), got {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class NliSnapshot:
    """Per-edge measured link state at one instant: bandwidth, delay, loss.

    Arrays are indexed by edge id of the owning topology. Domains:
    0 <= bw[e] <= capacity[e], delay[e] >= 0, 0 <= loss[e] < 1.
    """

    snapshot_id: int
    bw: np.ndarray  # available bandwidth, Mbit/s
    delay: np.ndarray  # ms
    loss: np.ndarray  # probability in [0, 1)

    @classmethod
    def create(
        cls,
        topo: Topology,
        snapshot_id: int,
        bw: Sequence[float],
        delay: Sequence[float],
        loss: Sequence[float],
    ) -> "NliSnapshot":
        m = topo.edge_count
        bw_a = _as_metric_array(bw, m, "bw")
        delay_a = _as_metric_array(delay, m, "delay")
        loss_a = _as_metric_array(loss, m, "loss")
        caps = topo.capacities
        if np.any(bw_a < 0) or np.any(bw_a > caps + 1e-9):
            raise SnapshotError(f"snapshot {snapshot_id}: bandwidth outside [0, capacity]")
        if np.any(delay_a < 0):
            raise SnapshotError(f"snapshot {snapshot_id}: negative delay")
        if np.any(loss_a < 0) or np.any(loss_a >= 1.0):
            raise SnapshotError(f"snapshot {snapshot_id}: loss outside [0, 1)")
        return cls(snapshot_id, bw_a, delay_a, loss_a)


# ---------------------------------------------------------------------------
# Multicast trees


@dataclass(frozen=True)
class MulticastTree:
    """A multicast distribution tree: source, destination set, tree edge ids."""

    source: int
    destinations: frozenset[int]
    edges: frozenset[int]

    @classmethod
    def create(cls, source: int, destinations: Iterable[int], edges: Iterable[int]) -> "MulticastTree":
        dests = frozenset(int(d) for d in destinations)
        if source in dests:
            raise TreeError(f"source {source} cannot also be a destination")
        if not dests:
            raise TreeError("destination set is empty")
        return cls(source, dests, frozenset(int(e) for e in edges))


@dataclass(frozen=True)
class TreeMetrics:
    bw: float  # mean over destinations of the path bottleneck bandwidth
    delay: float  # sum of per-edge delay over all tree edges
    loss: float  # 1 - prod(1 - loss_e) over all tree edges
    length: int  # number of tree edges


@dataclass(frozen=True)
class ValidationReport:
    acyclic: bool
    connected: bool
    covers_terminals: bool
    no_stray_leaves: bool
    failures: tuple[str, ...] = field(default_factory=tuple)

    @property
    def valid(self) -> bool:
        return not self.failures


def tree_adjacency(topo: Topology, edges: Iterable[int]) -> dict[int, list[tuple[int, int]]]:
    """Adjacency restricted to the given edge ids, neighbours ascending."""
    adj: dict[int, list[tuple[int, int]]] = {}
    for eid in edges:
        i, j = topo.endpoints(eid)
        adj.setdefault(i, []).append((j, eid))
        adj.setdefault(j, []).append((i, eid))
    for lst in adj.values():
        lst.sort()
    return adj


def tree_path(topo: Topology, edges: Iterable[int], start: int, goal: int) -> tuple[int, ...] | None:
    """Edge-id path from start to goal using only the given edges, or None.

    The edge set is assumed acyclic, so any path found is the unique one.
    """
    if start == goal:
        return ()
    adj = tree_adjacency(topo, edges)
    prev: dict[int, tuple[int, int]] = {}
    seen = {start}
    queue = [start]
    while queue:
        u = queue.pop(0)
        for v, eid in adj.get(u, ()):
            if v in seen:
                continue
            seen.add(v)
            prev[v] = (u, eid)
            if v == goal:
                path: list[int] = []
                node = goal
                while node != start:
                    node, eid2 = prev[node]
                    path.append(eid2)
                return tuple(reversed(path))
            queue.append(v)
    return None


def destination_paths(topo: Topology, tree: MulticastTree) -> dict[int, tuple[int, ...]]:
    """Unique source->destination edge paths inside the tree edge set."""
    paths: dict[int, tuple[int, ...]] = {}
    for d in sorted(tree.destinations):
        p = tree_path(topo, tree.edges, tree.source, d)
        if p is None:
            raise TreeError(f"destination {d} is not reachable from {tree.source} in the tree")
        paths[d] = p
    return paths


def tree_nodes(topo: Topology, tree: MulticastTree) -> set[int]:
    nodes = {tree.source}
    for eid in tree.edges:
        i, j = topo.endpoints(eid)
        nodes.add(i)
        nodes.add(j)
    return nodes


def path_metrics(path: Sequence[int], snap: NliSnapshot) -> tuple[float, float, float]:
    """(bottleneck bw, summed delay, combined loss) over one edge-id path."""
    if len(path) == 0:
        raise ValueError("path must contain at least one edge")
    idx = np.asarray(path, dtype=np.intp)
    bw = float(np.min(snap.bw[idx]))
    delay = float(np.sum(snap.delay[idx]))
    loss = 1.0 - float(np.prod(1.0 - snap.loss[idx]))
    return bw, delay, loss


def tree_metrics(topo: Topology, tree: MulticastTree, snap: NliSnapshot) -> TreeMetrics:
    """Aggregate tree metrics over the per-destination paths and tree edges."""
    paths = destination_paths(topo, tree)
    bws = []
    for d, p in paths.items():
        if len(p) == 0:
            raise TreeError(f"degenerate path to destination {d}")
        bws.append(float(np.min(snap.bw[np.asarray(p, dtype=np.intp)])))
    idx = np.asarray(sorted(tree.edges), dtype=np.intp)
    delay = float(np.sum(snap.delay[idx]))
    loss = 1.0 - float(np.prod(1.0 - snap.loss[idx]))
    return TreeMetrics(bw=float(np.mean(bws)), delay=delay, loss=loss, length=len(tree.edges))


def validate_tree(topo: Topology, tree: MulticastTree) -> ValidationReport:
    """Structural check: acyclic, connected, terminals covered, no stray leaves."""
    failures: list[str] = []

    nodes = tree_nodes(topo, tree)
    adj = tree_adjacency(topo, tree.edges)

    # connectivity over the touched node set, rooted at the source
    seen = {tree.source}
    stack = [tree.source]
    while stack:
        u = stack.pop()
        for v, _ in adj.get(u, ()):
            if v not in seen:
                seen.add(v)
                stack.append(v)
    connected = seen == nodes
    if not connected:
        failures.append(f"unreachable tree nodes: {sorted(nodes - seen)}")

    # |E| = |V| - 1 together with connectivity <=> tree
    acyclic = len(tree.edges) == len(nodes) - 1
    if not acyclic:
        failures.append(f"{len(tree.edges)} edges over {len(nodes)} nodes is not a tree")

    covers = tree.destinations <= nodes
    if not covers:
        failures.append(f"destinations missing from tree: {sorted(tree.destinations - nodes)}")
    if covers and connected:
        covers = all(d in seen for d in tree.destinations)
        if not covers:
            failures.append("destinations not connected to source")

    terminals = tree.destinations | {tree.source}
    stray = [
        u for u in nodes
        if len(adj.get(u, ())) == 1 and u not in terminals
    ] if tree.edges else []
    no_stray = not stray
    if stray:
        failures.append(f"non-terminal leaves: {sorted(stray)}")

    return ValidationReport(
        acyclic=acyclic,
        connected=connected,
        covers_terminals=covers,
        no_stray_leaves=no_stray,
        failures=tuple(failures),
    )


# ---------------------------------------------------------------------------
# Bundled default topology (14 nodes, 20 links)

_DEFAULT_EDGES: tuple[tuple[int, int, float, float], ...] = (
    (1, 2, 100.0, 3.0),
    (1, 3, 100.0, 3.0),
    (2, 4, 60.0, 6.0),
    (2, 5, 110.0, 2.5),
    (2, 6, 90.0, 3.0),
    (3, 4, 100.0, 2.5),
    (3, 5, 80.0, 4.0),
    (4, 5, 130.0, 2.0),
    (4, 6, 100.0, 2.5),
    (4, 7, 90.0, 3.5),
    (4, 9, 110.0, 2.5),
    (4, 13, 120.0, 2.0),
    (5, 7, 70.0, 5.0),
    (6, 11, 100.0, 2.5),
    (7, 8, 60.0, 5.5),
    (8, 14, 50.0, 7.0),
    (9, 11, 90.0, 3.0),
    (10, 11, 80.0, 4.0),
    (12, 13, 110.0, 2.2),
    (12, 14, 140.0, 1.8),
)


def default_topology() -> Topology:
    """The bundled 14-node evaluation topology (max degree 7, one stub node)."""
    return Topology(14, _DEFAULT_EDGES)
