"""Classic Steiner-tree constructions over snapshot-weighted graphs.

All algorithms are deterministic: ties in Dijkstra fall to the smaller
(predecessor, edge) pair, sorts always carry an id tie-breaker, and the exact
solver only takes strict improvements in a fixed scan order.
"""

from __future__ import annotations

import heapq
import math
from typing import Iterable, Sequence

import numpy as np

from .encoding import normalized_edge_metrics
from .topology import MulticastTree, NliSnapshot, Topology

WEIGHTINGS = ("bandwidth", "delay", "loss", "scalarized")

_BW_EPS = 1e-6  # keeps the widest link strictly positive under min-sum search

EXACT_TERMINAL_LIMIT = 10


class TerminalBudgetError(ValueError):
    """Raised when the exact solver is asked for more terminals than it can afford."""


def edge_weights(
    topo: Topology,
    snap: NliSnapshot,
    weighting: str,
    betas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> np.ndarray:
    """Non-negative per-edge costs for min-sum tree search.

    bandwidth: (max bw - bw) + eps, so wide links look cheap;
    loss: -log(1 - loss), making path sums equal combined-loss ranking;
    scalarized: convex mix of normalized (1-bw), delay, loss.
    """
    if weighting == "bandwidth":
        return (float(snap.bw.max()) - snap.bw) + _BW_EPS
    if weighting == "delay":
        return snap.delay.copy()
    if weighting == "loss":
        return -np.log1p(-snap.loss)
    if weighting == "scalarized":
        b1, b2, b3 = betas
        bw_n, delay_n, loss_n = normalized_edge_metrics(snap)
        return b1 * (1.0 - bw_n) + b2 * delay_n + b3 * loss_n
    raise ValueError(f"unknown weighting {weighting!r}; expected one of {WEIGHTINGS}")


def dijkstra(
    topo: Topology, weights: np.ndarray, sources: int | Iterable[int]
) -> tuple[np.ndarray, list[int], list[int]]:
    """Shortest paths from one or more sources.

    Returns (dist, pred_node, pred_edge), 1-based with index 0 unused;
    sources carry pred -1. Only strict improvements update predecessors;
    combined with the (dist, node) heap ordering and ascending adjacency this
    makes the forest a pure function of the inputs.
    """
    n = topo.node_count
    src = [sources] if isinstance(sources, int) else sorted(set(sources))
    dist = np.full(n + 1, np.inf)
    pred_node = [-1] * (n + 1)
    pred_edge = [-1] * (n + 1)
    heap: list[tuple[float, int]] = []
    for s in src:
        dist[s] = 0.0
        heapq.heappush(heap, (0.0, s))
    while heap:
        du, u = heapq.heappop(heap)
        if du > dist[u]:
            continue
        for v, eid in topo.neighbors(u):
            nd = du + weights[eid]
            if nd < dist[v]:
                dist[v] = nd
                pred_node[v], pred_edge[v] = u, eid
                heapq.heappush(heap, (nd, v))
    return dist, pred_node, pred_edge


def walk_to_root(pred_node: Sequence[int], pred_edge: Sequence[int], node: int) -> tuple[list[int], int]:
    """Follow predecessors from node to its search root; returns (edge ids, root)."""
    edges: list[int] = []
    while pred_edge[node] != -1:
        edges.append(pred_edge[node])
        node = pred_node[node]
    return edges, node


class _UnionFind:
    def __init__(self, nodes: Iterable[int]):
        self.parent = {u: u for u in nodes}

    def find(self, u: int) -> int:
        while self.parent[u] != u:
            self.parent[u] = self.parent[self.parent[u]]
            u = self.parent[u]
        return u

    def union(self, u: int, v: int) -> bool:
        ru, rv = self.find(u), self.find(v)
        if ru == rv:
            return False
        self.parent[rv] = ru
        return True


def _mst_over_edges(nodes: set[int], edge_ids: Iterable[int], topo: Topology, weights: np.ndarray) -> set[int]:
    """Kruskal restricted to the given edges, ties broken by edge id."""
    uf = _UnionFind(nodes)
    chosen: set[int] = set()
    for _, eid in sorted((weights[e], e) for e in set(edge_ids)):
        i, j = topo.endpoints(eid)
        if uf.union(i, j):
            chosen.add(eid)
    return chosen


def _prune_stray_leaves(topo: Topology, edges: set[int], terminals: set[int]) -> set[int]:
    edges = set(edges)
    while True:
        degree: dict[int, list[int]] = {}
        for eid in edges:
            i, j = topo.endpoints(eid)
            degree.setdefault(i, []).append(eid)
            degree.setdefault(j, []).append(eid)
        dead = [
            eids[0]
            for node, eids in degree.items()
            if len(eids) == 1 and node not in terminals
        ]
        if not dead:
            return edges
        edges -= set(dead)


def _finish(topo: Topology, source: int, destinations: Iterable[int], edges: set[int]) -> MulticastTree:
    dests = set(destinations)
    pruned = _prune_stray_leaves(topo, edges, dests | {source})
    return MulticastTree.create(source, dests, pruned)


def _induced_edges(topo: Topology, nodes: set[int]) -> list[int]:
    return [eid for eid, e in enumerate(topo.edges) if e.i in nodes and e.j in nodes]


def kmb(
    topo: Topology,
    snap: NliSnapshot,
    weighting: str,
    source: int,
    destinations: Iterable[int],
    betas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> MulticastTree:
    """Metric-closure MST, expanded to real paths, re-spanned, and pruned."""
    w = edge_weights(topo, snap, weighting, betas)
    terminals = sorted(set(destinations) | {source})
    sp = {t: dijkstra(topo, w, t) for t in terminals}

    closure = []
    for ai, a in enumerate(terminals):
        for b in terminals[ai + 1:]:
            closure.append((sp[a][0][b], a, b))
    uf = _UnionFind(terminals)
    mst_pairs = []
    for _, a, b in sorted(closure):
        if uf.union(a, b):
            mst_pairs.append((a, b))

    path_nodes: set[int] = set(terminals)
    for a, b in mst_pairs:
        edges, root = walk_to_root(sp[a][1], sp[a][2], b)
        assert root == a
        for eid in edges:
            i, j = topo.endpoints(eid)
            path_nodes.update((i, j))

    spanning = _mst_over_edges(path_nodes, _induced_edges(topo, path_nodes), topo, w)
    return _finish(topo, source, destinations, spanning)


def mph(
    topo: Topology,
    snap: NliSnapshot,
    weighting: str,
    source: int,
    destinations: Iterable[int],
    betas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> MulticastTree:
    """Cheapest-insertion: repeatedly attach the nearest uncovered destination."""
    w = edge_weights(topo, snap, weighting, betas)
    tree_nodes = {source}
    tree_edges: set[int] = set()
    remaining = set(destinations)
    while remaining:
        dist, pred_node, pred_edge = dijkstra(topo, w, tree_nodes)
        target = min(remaining, key=lambda d: (dist[d], d))
        edges, _ = walk_to_root(pred_node, pred_edge, target)
        for eid in edges:
            i, j = topo.endpoints(eid)
            tree_nodes.update((i, j))
        tree_edges.update(edges)
        remaining -= tree_nodes  # a grown path can swallow several destinations
    return _finish(topo, source, destinations, tree_edges)


def adh(
    topo: Topology,
    snap: NliSnapshot,
    weighting: str,
    source: int,
    destinations: Iterable[int],
    betas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> MulticastTree:
    """Average-distance heuristic: join the two components closest to a hub node."""
    w = edge_weights(topo, snap, weighting, betas)
    n = topo.node_count
    sp = {v: dijkstra(topo, w, v) for v in range(1, n + 1)}

    comps: list[set[int]] = [{source}] + [{d} for d in sorted(set(destinations))]
    forest: set[int] = set()
    uf = _UnionFind(range(1, n + 1))

    while len(comps) > 1:
        best: tuple[float, int] | None = None
        best_pair: tuple[int, int] | None = None
        for v in range(1, n + 1):
            dist_v = sp[v][0]
            # nearest entry node of each component, as (distance, node)
            nearest = [min((dist_v[u], u) for u in comp) for comp in comps]
            order = sorted(range(len(comps)), key=lambda c: (nearest[c][0], c))
            c1, c2 = order[0], order[1]
            score = (nearest[c1][0] + nearest[c2][0]) / 2.0
            if best is None or (score, v) < best:
                best = (score, v)
                best_pair = (c1, c2)
        assert best is not None and best_pair is not None
        v = best[1]
        c1, c2 = best_pair
        dist_v, pred_node, pred_edge = sp[v]
        merged_nodes = set(comps[c1]) | set(comps[c2]) | {v}
        for comp in (comps[c1], comps[c2]):
            entry = min((dist_v[u], u) for u in comp)[1]
            node = entry
            while node != v:
                eid = pred_edge[node]
                i, j = topo.endpoints(eid)
                if uf.union(i, j):
                    forest.add(eid)
                merged_nodes.update((i, j))
                node = pred_node[node]
        survivors = [comp for k, comp in enumerate(comps) if k not in (c1, c2)]
        # absorb any other component the new paths ran through
        absorbed = [comp for comp in survivors if comp & merged_nodes]
        for comp in absorbed:
            merged_nodes |= comp
        comps = [comp for comp in survivors if not (comp & merged_nodes)]
        comps.insert(0, merged_nodes)
    return _finish(topo, source, destinations, forest)


def exact_steiner(
    topo: Topology,
    snap: NliSnapshot,
    weighting: str,
    source: int,
    destinations: Iterable[int],
    betas: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3),
) -> MulticastTree:
    """Minimum-cost Steiner tree by subset dynamic programming.

    Cost is the sum of edge weights. Terminal budget: |destinations| + 1 must
    not exceed EXACT_TERMINAL_LIMIT; runtime grows as 3^|terminals|.
    """
    dests = sorted(set(destinations))
    if len(dests) + 1 > EXACT_TERMINAL_LIMIT:
        raise TerminalBudgetError(
            f"{len(dests) + 1} terminals exceed the exact-solver limit of {EXACT_TERMINAL_LIMIT}"
        )
    w = edge_weights(topo, snap, weighting, betas)
    n = topo.node_count
    sp = {v: dijkstra(topo, w, v) for v in range(1, n + 1)}

    k = len(dests)
    full = (1 << k) - 1
    INF = math.inf
    dp = [[INF] * (n + 1) for _ in range(1 << k)]
    # choice[mask][v]: ('leaf', ti) | ('merge', submask) | ('walk', u, eid)
    choice: list[list[tuple | None]] = [[None] * (n + 1) for _ in range(1 << k)]

    for ti, t in enumerate(dests):
        mask = 1 << ti
        dist_t = sp[t][0]
        for v in range(1, n + 1):
            dp[mask][v] = dist_t[v]
            choice[mask][v] = ("leaf", ti)

    for mask in range(1, full + 1):
        if mask & (mask - 1) == 0:
            continue  # singletons are seeded above
        row = dp[mask]
        low = mask & (-mask)
        for v in range(1, n + 1):
            sub = (mask - 1) & mask
            while sub:
                if sub & low:  # each split visited once
                    cand = dp[sub][v] + dp[mask ^ sub][v]
                    if cand < row[v]:
                        row[v] = cand
                        choice[mask][v] = ("merge", sub)
                sub = (sub - 1) & mask
        # grow: relax tree roots along graph edges (Dijkstra over current row)
        heap = [(row[v], v) for v in range(1, n + 1) if row[v] < INF]
        heapq.heapify(heap)
        while heap:
            du, u = heapq.heappop(heap)
            if du > row[u]:
                continue
            for v, eid in topo.neighbors(u):
                nd = du + w[eid]
                if nd < row[v]:
                    row[v] = nd
                    choice[mask][v] = ("walk", u, eid)
                    heapq.heappush(heap, (nd, v))

    edges: set[int] = set()
    stack = [(full, source)]
    while stack:
        mask, v = stack.pop()
        ch = choice[mask][v]
        if ch is None:  # singleton rooted at its own terminal
            continue
        kind = ch[0]
        if kind == "leaf":
            t = dests[ch[1]]
            path, root = walk_to_root(sp[t][1], sp[t][2], v)
            assert root == t
            edges.update(path)
        elif kind == "merge":
            stack.append((ch[1], v))
            stack.append((mask ^ ch[1], v))
        else:
            edges.add(ch[2])
            stack.append((mask, ch[1]))

    nodes = {source}
    for eid in edges:
        i, j = topo.endpoints(eid)
        nodes.update((i, j))
    # zero-weight edges can leave harmless parallel detours; re-span to be safe
    spanning = _mst_over_edges(nodes, edges, topo, w)
    return _finish(topo, source, dests, spanning)


def tree_cost(tree: MulticastTree, weights: np.ndarray) -> float:
    return float(sum(weights[e] for e in tree.edges))
