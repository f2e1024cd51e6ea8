"""Synthetic SDN link-state measurement: traffic, port counters, snapshots.

A gravity demand matrix is routed over min-hop paths; per-port counters are
synthesized from the resulting loads and the published metrics (available
bandwidth, loss, delay) are then recovered from those counters exactly the
way a controller would, so every snapshot value passes through the
counter-difference equations below.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .topology import NliSnapshot, SnapshotError, Topology


class MeasurementError(ValueError):
    """Raised when counter samples cannot yield a metric (e.g. no elapsed time)."""


class SnapshotFormatError(SnapshotError):
    """Raised for malformed or incompatible snapshot files."""


@dataclass(frozen=True)
class PortCounters:
    """Cumulative per-port counters at one sample instant."""

    tx_bytes: float
    rx_bytes: float
    tx_packets: float
    rx_packets: float
    duration: float  # seconds since the port came up


def residual_bandwidth(before: PortCounters, after: PortCounters, capacity: float) -> float:
    """Available bandwidth in Mbit/s from two samples of the same port.

    capacity - |delta(tx+rx bytes)| * 8 / 1e6 / delta(duration), clamped to
    [0, capacity].
    """
    dt = after.duration - before.duration
    if dt <= 0:
        raise MeasurementError(f"non-increasing port duration: {before.duration} -> {after.duration}")
    dbytes = abs((after.tx_bytes + after.rx_bytes) - (before.tx_bytes + before.rx_bytes))
    used = dbytes * 8.0 / 1e6 / dt
    return min(max(capacity - used, 0.0), capacity)


def link_loss(port_i: PortCounters, port_j: PortCounters) -> float:
    """Worst-direction packet loss ratio from the two endpoint ports.

    max((tx_i - rx_j)/tx_i, (tx_j - rx_i)/tx_j), clamped to [0, 1]; a
    direction with zero transmitted packets contributes 0.
    """
    fwd = (port_i.tx_packets - port_j.rx_packets) / port_i.tx_packets if port_i.tx_packets > 0 else 0.0
    rev = (port_j.tx_packets - port_i.rx_packets) / port_j.tx_packets if port_j.tx_packets > 0 else 0.0
    return min(max(max(fwd, rev), 0.0), 1.0)


def link_delay(lldp_ms: tuple[float, float], echo_ms: tuple[float, float]) -> float:
    """One-way link delay from two LLDP round trips minus the controller echoes.

    (lldp1 + lldp2 - echo1 - echo2) / 2, clamped to be non-negative.
    """
    d = (lldp_ms[0] + lldp_ms[1] - echo_ms[0] - echo_ms[1]) / 2.0
    return max(d, 0.0)


def gravity_traffic(node_count: int, total_volume: float, rng: np.random.Generator) -> np.ndarray:
    """Gravity-model demand matrix (Mbit/s), zero diagonal, entries summing to total.

    Node weights are drawn uniformly from [0.5, 1.5]; demand between distinct
    nodes is proportional to the product of their weights.
    """
    if node_count < 2:
        raise ValueError("need at least 2 nodes")
    if total_volume < 0:
        raise ValueError("total volume must be non-negative")
    w = rng.uniform(0.5, 1.5, size=node_count)
    outer = np.outer(w, w)
    np.fill_diagonal(outer, 0.0)
    denom = outer.sum()
    return total_volume * outer / denom


def route_min_hop(topo: Topology, demand: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate demand onto min-hop paths; returns per-edge directed loads.

    load_fwd[e] carries flow travelling from the canonical endpoint i to j,
    load_rev[e] the opposite way. BFS uses the ascending adjacency order, so
    routing is deterministic.
    """
    n = topo.node_count
    if demand.shape != (n, n):
        raise ValueError(f"demand must be ({n},{n}), got {demand.shape}")
    load_fwd = np.zeros(topo.edge_count)
    load_rev = np.zeros(topo.edge_count)
    for s in range(1, n + 1):
        prev: dict[int, tuple[int, int]] = {}
        seen = {s}
        queue = [s]
        while queue:
            u = queue.pop(0)
            for v, eid in topo.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    prev[v] = (u, eid)
                    queue.append(v)
        for t in range(1, n + 1):
            vol = demand[s - 1, t - 1]
            if t == s or vol <= 0.0:
                continue
            node = t
            while node != s:
                parent, eid = prev[node]
                ei, _ = topo.endpoints(eid)
                if parent == ei:  # travelling i -> j
                    load_fwd[eid] += vol
                else:
                    load_rev[eid] += vol
                node = parent
    return load_fwd, load_rev


@dataclass(frozen=True)
class SimConfig:
    """Knobs for snapshot synthesis."""

    total_volume: float | None = None  # Mbit/s of demand; default 8% of summed capacity
    interval: float = 10.0  # seconds between the two counter samples
    loss_floor: float = 0.001
    loss_slope: float = 0.05  # added loss per unit of utilisation above the knee
    util_knee: float = 0.7
    queue_coeff: float = 2.0  # delay multiplier: base * (1 + coeff * util^2)
    base_packets: float = 100.0  # control-plane chatter so packet counters never sit at zero
    packet_size: float = 1500.0  # bytes

    def volume_for(self, topo: Topology) -> float:
        if self.total_volume is not None:
            return self.total_volume
        return 0.08 * float(np.sum(topo.capacities))


@dataclass(frozen=True)
class EdgeMeasurement:
    """Raw material for one edge's snapshot record: counters plus probe timings."""

    edge_id: int
    port_i_before: PortCounters
    port_i_after: PortCounters
    port_j_before: PortCounters
    port_j_after: PortCounters
    lldp_ms: tuple[float, float]
    echo_ms: tuple[float, float]


@dataclass(frozen=True)
class SimResult:
    snapshots: tuple[NliSnapshot, ...]
    demands: tuple[np.ndarray, ...]
    measurements: tuple[tuple[EdgeMeasurement, ...], ...]


def _edge_truth(load: float, capacity: float, base_delay: float, cfg: SimConfig) -> tuple[float, float]:
    """(true loss, true delay ms) for one edge under the given offered load."""
    util = load / capacity
    loss = min(cfg.loss_floor + cfg.loss_slope * max(0.0, util - cfg.util_knee), 0.99)
    delay = base_delay * (1.0 + cfg.queue_coeff * util * util)
    return loss, delay


def snapshot_from_measurements(
    topo: Topology, snapshot_id: int, measurements: Sequence[EdgeMeasurement]
) -> NliSnapshot:
    """Recover the three metrics from counters, rounded to 6 decimals."""
    m = topo.edge_count
    if len(measurements) != m:
        raise MeasurementError(f"expected {m} edge measurements, got {len(measurements)}")
    bw = np.zeros(m)
    delay = np.zeros(m)
    loss = np.zeros(m)
    for meas in measurements:
        eid = meas.edge_id
        cap = topo.edges[eid].capacity
        bw[eid] = round(residual_bandwidth(meas.port_i_before, meas.port_i_after, cap), 6)
        loss[eid] = round(link_loss(meas.port_i_after, meas.port_j_after), 6)
        delay[eid] = round(link_delay(meas.lldp_ms, meas.echo_ms), 6)
    return NliSnapshot.create(topo, snapshot_id, bw, delay, loss)


def simulate(topo: Topology, count: int, seed: int, cfg: SimConfig | None = None) -> SimResult:
    """Generate `count` snapshots with full measurement traces.

    Counters are cumulative across snapshots, so repeated samples of one port
    have strictly increasing durations and monotone byte counts.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    cfg = cfg or SimConfig()
    volume = cfg.volume_for(topo)
    m = topo.edge_count

    # cumulative per-edge counter state; index 0 = canonical endpoint i's port
    cum_tx_bytes = np.zeros((m, 2))
    cum_rx_bytes = np.zeros((m, 2))
    cum_tx_pkts = np.zeros((m, 2))
    cum_rx_pkts = np.zeros((m, 2))

    snapshots: list[NliSnapshot] = []
    demands: list[np.ndarray] = []
    traces: list[tuple[EdgeMeasurement, ...]] = []
    children = np.random.SeedSequence(seed).spawn(count)

    for k in range(count):
        rng = np.random.default_rng(children[k])
        demand = gravity_traffic(topo.node_count, volume, rng)
        load_fwd, load_rev = route_min_hop(topo, demand)

        t0 = k * cfg.interval
        t1 = t0 + cfg.interval
        meas: list[EdgeMeasurement] = []
        for eid in range(m):
            e = topo.edges[eid]
            loss_true, delay_true = _edge_truth(load_fwd[eid] + load_rev[eid], e.capacity, e.base_delay, cfg)

            bytes_fwd = load_fwd[eid] * 1e6 / 8.0 * cfg.interval
            bytes_rev = load_rev[eid] * 1e6 / 8.0 * cfg.interval
            pkts_fwd = cfg.base_packets + bytes_fwd / cfg.packet_size
            pkts_rev = cfg.base_packets + bytes_rev / cfg.packet_size

            def port(side: int, t: float) -> PortCounters:
                return PortCounters(
                    tx_bytes=cum_tx_bytes[eid, side],
                    rx_bytes=cum_rx_bytes[eid, side],
                    tx_packets=cum_tx_pkts[eid, side],
                    rx_packets=cum_rx_pkts[eid, side],
                    duration=t,
                )

            before_i, before_j = port(0, t0), port(1, t0)
            cum_tx_bytes[eid, 0] += bytes_fwd
            cum_rx_bytes[eid, 0] += bytes_rev
            cum_tx_bytes[eid, 1] += bytes_rev
            cum_rx_bytes[eid, 1] += bytes_fwd
            cum_tx_pkts[eid, 0] += pkts_fwd
            cum_rx_pkts[eid, 0] += pkts_rev * (1.0 - loss_true)
            cum_tx_pkts[eid, 1] += pkts_rev
            cum_rx_pkts[eid, 1] += pkts_fwd * (1.0 - loss_true)
            after_i, after_j = port(0, t1), port(1, t1)

            echo = (1.0, 1.0)
            lldp = (echo[0] + delay_true, echo[1] + delay_true)
            meas.append(
                EdgeMeasurement(
                    edge_id=eid,
                    port_i_before=before_i,
                    port_i_after=after_i,
                    port_j_before=before_j,
                    port_j_after=after_j,
                    lldp_ms=lldp,
                    echo_ms=echo,
                )
            )
        snapshots.append(snapshot_from_measurements(topo, k, meas))
        demands.append(demand)
        traces.append(tuple(meas))

    return SimResult(tuple(snapshots), tuple(demands), tuple(traces))


def generate_snapshots(
    topo: Topology, count: int, seed: int, cfg: SimConfig | None = None
) -> list[NliSnapshot]:
    return list(simulate(topo, count, seed, cfg).snapshots)


# ---------------------------------------------------------------------------
# Snapshot file format: header "nli v1 <topology-hash> <count>", then one
# "snap_id i j bw delay loss" line per (snapshot, edge), six-decimal fixed.

_FORMAT_VERSION = "v1"


def save_snapshots(path: str, topo: Topology, snapshots: Sequence[NliSnapshot]) -> None:
    lines = [f"nli {_FORMAT_VERSION} {topo.hash_hex()} {len(snapshots)}"]
    for snap in snapshots:
        for eid, e in enumerate(topo.edges):
            lines.append(
                f"{snap.snapshot_id} {e.i} {e.j} "
                f"{snap.bw[eid]:.6f} {snap.delay[eid]:.6f} {snap.loss[eid]:.6f}"
            )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_snapshots(path: str, topo: Topology) -> list[NliSnapshot]:
    """Parse and validate a snapshot file against the given topology."""
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = [ln.strip() for ln in fh]
    lines = [ln for ln in raw_lines if ln and not ln.startswith("#")]
    if not lines:
        raise SnapshotFormatError(f"{path}: empty snapshot file")

    head = lines[0].split()
    if len(head) != 4 or head[0] != "nli":
        raise SnapshotFormatError(f"{path}: bad header {lines[0]!r}")
    if head[1] != _FORMAT_VERSION:
        raise SnapshotFormatError(f"{path}: unsupported format version {head[1]!r}")
    if head[2] != topo.hash_hex():
        raise SnapshotFormatError(
            f"{path}: topology hash mismatch (file {head[2]}, topology {topo.hash_hex()})"
        )
    try:
        count = int(head[3])
    except ValueError:
        raise SnapshotFormatError(f"{path}: bad snapshot count {head[3]!r}") from None

    m = topo.edge_count
    expected_records = count * m
    records = lines[1:]
    if len(records) != expected_records:
        raise SnapshotFormatError(
            f"{path}: expected {expected_records} records for {count} snapshots, got {len(records)}"
        )

    per_snap: dict[int, dict[int, tuple[float, float, float]]] = {}
    for ln_no, line in enumerate(records, start=2):
        fields = line.split()
        if len(fields) != 6:
            raise SnapshotFormatError(f"{path}:{ln_no}: expected 6 fields, got {line!r}")
        try:
            sid, i, j = int(fields[0]), int(fields[1]), int(fields[2])
            bw, delay, loss = float(fields[3]), float(fields[4]), float(fields[5])
        except ValueError:
            raise SnapshotFormatError(f"{path}:{ln_no}: unparsable record {line!r}") from None
        eid = topo.edge_id(i, j)
        bucket = per_snap.setdefault(sid, {})
        if eid in bucket:
            raise SnapshotFormatError(f"{path}:{ln_no}: duplicate edge ({i},{j}) in snapshot {sid}")
        bucket[eid] = (bw, delay, loss)

    if len(per_snap) != count:
        raise SnapshotFormatError(f"{path}: header claims {count} snapshots, found {len(per_snap)}")

    snapshots = []
    for sid in sorted(per_snap):
        bucket = per_snap[sid]
        if len(bucket) != m:
            raise SnapshotFormatError(
                f"{path}: snapshot {sid} has {len(bucket)} of {m} edge records"
            )
        bw = [bucket[eid][0] for eid in range(m)]
        delay = [bucket[eid][1] for eid in range(m)]
        loss = [bucket[eid][2] for eid in range(m)]
        snapshots.append(NliSnapshot.create(topo, sid, bw, delay, loss))
    return snapshots
