"""Shared helpers for tests: random instances and a brute-force tree oracle."""

from __future__ import annotations

import itertools

import numpy as np

from mcroute.topology import NliSnapshot, Topology


def random_topology(rng: np.random.Generator, n: int, extra_edge_prob: float = 0.35) -> Topology:
    """Random connected graph: a random spanning tree plus Bernoulli extras."""
    order = list(rng.permutation(np.arange(1, n + 1)))
    edges: set[tuple[int, int]] = set()
    for idx in range(1, n):
        a = int(order[idx])
        b = int(order[int(rng.integers(0, idx))])
        edges.add((min(a, b), max(a, b)))
    for i in range(1, n + 1):
        for j in range(i + 1, n + 1):
            if (i, j) not in edges and rng.random() < extra_edge_prob:
                edges.add((i, j))
    caps = {e: float(rng.uniform(50.0, 150.0)) for e in edges}
    delays = {e: float(rng.uniform(0.5, 8.0)) for e in edges}
    return Topology(n, [(i, j, caps[(i, j)], delays[(i, j)]) for i, j in sorted(edges)])


def random_snapshot(rng: np.random.Generator, topo: Topology, snapshot_id: int = 0) -> NliSnapshot:
    m = topo.edge_count
    caps = topo.capacities
    bw = np.round(caps * rng.uniform(0.05, 1.0, size=m), 6)
    delay = np.round(topo.base_delays * rng.uniform(1.0, 4.0, size=m), 6)
    loss = np.round(rng.uniform(0.0, 0.05, size=m), 6)
    return NliSnapshot.create(topo, snapshot_id, bw, delay, loss)


def random_terminals(rng: np.random.Generator, n: int, max_dests: int) -> tuple[int, list[int]]:
    k = int(rng.integers(1, min(max_dests, n - 1) + 1))
    picks = rng.choice(np.arange(1, n + 1), size=k + 1, replace=False)
    return int(picks[0]), [int(d) for d in picks[1:]]


def enumeration_steiner_cost(topo: Topology, weights: np.ndarray, source: int, dests: list[int]) -> float:
    """Minimum Steiner cost as min over node supersets of the induced MST cost.

    Exponential in non-terminal count; for use on small graphs only.
    """
    terminals = {source, *dests}
    others = [v for v in range(1, topo.node_count + 1) if v not in terminals]
    best = np.inf
    for count in range(len(others) + 1):
        for combo in itertools.combinations(others, count):
            nodes = terminals | set(combo)
            eids = [
                eid for eid, e in enumerate(topo.edges) if e.i in nodes and e.j in nodes
            ]
            parent = {u: u for u in nodes}

            def find(u: int) -> int:
                while parent[u] != u:
                    parent[u] = parent[parent[u]]
                    u = parent[u]
                return u

            cost, joined = 0.0, 0
            for w_e, eid in sorted((weights[e], e) for e in eids):
                ri, rj = find(topo.edges[eid].i), find(topo.edges[eid].j)
                if ri != rj:
                    parent[rj] = ri
                    cost += w_e
                    joined += 1
            if joined == len(nodes) - 1:
                best = min(best, cost)
    return float(best)
