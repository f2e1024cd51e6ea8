"""Tree-construction environment: fork-node subgoals, edge-slot moves, rewards.

The agent alternates two decision levels. A subgoal picks a fork node that
must already be on the tree; the edge level then grows a path from that fork
one adjacency slot at a time until it lands on an uncovered destination.
Rewards read min-max normalized snapshot metrics, so every reward term is
scale-free.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .encoding import (
    encode_goal_matrix,
    encode_link_matrices,
    encode_tree_state,
    normalized_edge_metrics,
    stack_states,
)
from .topology import MulticastTree, NliSnapshot, Topology, destination_paths, tree_path


class ProtocolError(RuntimeError):
    """Raised when step/subgoal calls violate the interaction contract."""


@dataclass(frozen=True)
class RewardConfig:
    """Weights and penalties for the scale-free reward terms.

    The three betas should sum to 1 so the best single-subgoal reward is 1.0.
    step_scale keeps per-edge shaping two orders below the subgoal reward.
    """

    beta_bw: float = 1 / 3
    beta_delay: float = 1 / 3
    beta_loss: float = 1 / 3
    step_scale: float = 0.01
    illegal_subgoal_penalty: float = -0.5  # fork node not on the tree
    none_slot_penalty: float = -0.5  # action slot beyond the node degree
    revisit_penalty: float = -0.5  # tree edge re-walked or cycle attempted


# step() outcome scenarios
FRESH_EDGE = 1  # new edge to a node outside the tree
NONE_SLOT = 2  # empty adjacency slot; state untouched
TREE_EDGE = 3  # walked an edge already in the tree
CYCLE_EDGE = 4  # new edge closing a cycle; traversed but not adopted


@dataclass
class EnvState:
    """Construction progress; everything the encoders need to draw channels."""

    snapshot_id: int
    tree_nodes: set[int]
    tree_edges: set[int]
    mark_counts: dict[int, int]
    current: int
    fork_history: list[int]
    remaining: set[int]

    def copy(self) -> "EnvState":
        return EnvState(
            snapshot_id=self.snapshot_id,
            tree_nodes=set(self.tree_nodes),
            tree_edges=set(self.tree_edges),
            mark_counts=dict(self.mark_counts),
            current=self.current,
            fork_history=list(self.fork_history),
            remaining=set(self.remaining),
        )


@dataclass(frozen=True)
class StepOutcome:
    scenario: int
    moved_to: int | None
    r_in: float
    r_ex: float | None  # set only when the move completes the subgoal
    subgoal_done: bool
    episode_done: bool
    truncated: bool


def _quality(cfg: RewardConfig, bw_n: float, delay_n: float, loss_n: float) -> float:
    return cfg.beta_bw * bw_n + cfg.beta_delay * (1.0 - delay_n) + cfg.beta_loss * (1.0 - loss_n)


def reward_step(cfg: RewardConfig, bw_n: np.ndarray, delay_n: np.ndarray, loss_n: np.ndarray, eid: int) -> float:
    """Small per-edge shaping reward for a fresh-growth move."""
    return cfg.step_scale * _quality(cfg, float(bw_n[eid]), float(delay_n[eid]), float(loss_n[eid]))


def reward_goal(
    cfg: RewardConfig, bw_n: np.ndarray, delay_n: np.ndarray, loss_n: np.ndarray, path: Sequence[int]
) -> float:
    """Subgoal-completion reward over the fork-to-destination path.

    Aggregates normalized metrics with the path forms: bottleneck for
    bandwidth, sum for delay, complement-product for loss.
    """
    idx = np.asarray(path, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("subgoal path cannot be empty")
    bw_agg = float(np.min(bw_n[idx]))
    delay_agg = float(np.sum(delay_n[idx]))
    loss_agg = 1.0 - float(np.prod(1.0 - loss_n[idx]))
    return _quality(cfg, bw_agg, delay_agg, loss_agg)


def reward_finish(
    cfg: RewardConfig,
    topo: Topology,
    tree: MulticastTree,
    bw_n: np.ndarray,
    delay_n: np.ndarray,
    loss_n: np.ndarray,
) -> float:
    """Episode-completion bonus over the final tree's aggregate metrics."""
    paths = destination_paths(topo, tree)
    bottlenecks = [float(np.min(bw_n[np.asarray(p, dtype=np.intp)])) for p in paths.values()]
    idx = np.asarray(sorted(tree.edges), dtype=np.intp)
    bw_agg = float(np.mean(bottlenecks))
    delay_agg = float(np.sum(delay_n[idx]))
    loss_agg = 1.0 - float(np.prod(1.0 - loss_n[idx]))
    return _quality(cfg, bw_agg, delay_agg, loss_agg)


class MulticastEnv:
    """Grows one multicast tree per episode over a fixed snapshot.

    Interaction protocol: reset -> (subgoal_step -> step*...)* until every
    destination is covered, the step budget (step_cap_factor * n) runs out,
    or too many illegal subgoals accumulate (strike_cap_factor * |D|).
    """

    def __init__(
        self,
        topo: Topology,
        reward_cfg: RewardConfig | None = None,
        step_cap_factor: int = 8,
        strike_cap_factor: int = 4,
    ):
        self.topo = topo
        self.reward_cfg = reward_cfg or RewardConfig()
        self.step_cap_factor = step_cap_factor
        self.strike_cap_factor = strike_cap_factor
        self.state: EnvState | None = None
        self._snap: NliSnapshot | None = None
        self._active_subgoal: int | None = None
        self.intrinsic_steps = 0
        self.illegal_subgoals = 0

    # -- episode control ----------------------------------------------------

    def reset(self, snap: NliSnapshot, source: int, destinations: Iterable[int]) -> EnvState:
        dests = set(int(d) for d in destinations)
        n = self.topo.node_count
        if not (1 <= source <= n):
            raise ValueError(f"source {source} outside 1..{n}")
        if not dests:
            raise ValueError("need at least one destination")
        bad = [d for d in dests if not (1 <= d <= n)]
        if bad:
            raise ValueError(f"destinations outside 1..{n}: {sorted(bad)}")
        if source in dests:
            raise ValueError(f"source {source} listed as destination")

        self._snap = snap
        self._bw_n, self._delay_n, self._loss_n = normalized_edge_metrics(snap)
        self._link_channels = encode_link_matrices(self.topo, snap)
        self.state = EnvState(
            snapshot_id=snap.snapshot_id,
            tree_nodes={source},
            tree_edges=set(),
            mark_counts={},
            current=source,
            fork_history=[],
            remaining=dests,
        )
        self._source = source
        self._destinations = frozenset(dests)
        self._active_subgoal = None
        self.intrinsic_steps = 0
        self.illegal_subgoals = 0
        return self.state

    @property
    def step_cap(self) -> int:
        return self.step_cap_factor * self.topo.node_count

    @property
    def strike_cap(self) -> int:
        return self.strike_cap_factor * len(self._destinations)

    @property
    def truncated(self) -> bool:
        return self.intrinsic_steps >= self.step_cap or self.illegal_subgoals >= self.strike_cap

    @property
    def done(self) -> bool:
        return self.state is not None and not self.state.remaining

    def legal_forks(self) -> frozenset[int]:
        self._require_reset()
        return frozenset(self.state.tree_nodes)

    # -- observations ---------------------------------------------------------

    def meta_state(self) -> np.ndarray:
        """(4, n, n): progress channel plus the three link channels."""
        self._require_reset()
        m_t = encode_tree_state(self.topo, self.state.mark_counts, self.state.current)
        return stack_states(m_t, *self._link_channels)

    def intrinsic_state(self) -> np.ndarray:
        """(5, n, n): meta channels plus the fork-selection channel."""
        self._require_reset()
        m_t = encode_tree_state(self.topo, self.state.mark_counts, self.state.current)
        m_g = encode_goal_matrix(self.topo, self.state.fork_history)
        return stack_states(m_t, *self._link_channels, m_g)

    # -- decisions ------------------------------------------------------------

    def subgoal_step(self, g: int) -> bool:
        """Select fork node g; returns False (and counts a strike) if illegal."""
        self._require_reset()
        if self.done:
            raise ProtocolError("episode already complete")
        if self.truncated:
            raise ProtocolError("episode already truncated")
        if not (1 <= g <= self.topo.node_count):
            raise ValueError(f"fork node {g} outside 1..{self.topo.node_count}")
        if g not in self.state.tree_nodes:
            self.illegal_subgoals += 1
            return False
        self._active_subgoal = g
        self.state.fork_history.append(g)
        self.state.current = g
        return True

    def step(self, action: int) -> StepOutcome:
        """Take one edge-slot action for the active subgoal."""
        self._require_reset()
        if self._active_subgoal is None:
            raise ProtocolError("no active subgoal; call subgoal_step first")
        if self.done:
            raise ProtocolError("episode already complete")
        if self.truncated:
            raise ProtocolError("episode already truncated")
        if not (0 <= action < self.topo.max_degree):
            raise ValueError(f"action {action} outside 0..{self.topo.max_degree - 1}")

        st = self.state
        cfg = self.reward_cfg
        slots = self.topo.neighbors(st.current)
        self.intrinsic_steps += 1

        if action >= len(slots):  # empty slot: nothing changes
            return self._outcome(NONE_SLOT, None, cfg.none_slot_penalty, None, False)

        v, eid = slots[action]
        if eid in st.tree_edges:  # walking the existing tree
            st.mark_counts[eid] = st.mark_counts.get(eid, 0) + 1
            st.current = v
            return self._outcome(TREE_EDGE, v, cfg.revisit_penalty, None, False)

        if v in st.tree_nodes:  # fresh edge, but both ends already on the tree
            st.mark_counts[eid] = st.mark_counts.get(eid, 0) + 1
            st.current = v
            return self._outcome(CYCLE_EDGE, v, cfg.revisit_penalty, None, False)

        # fresh growth
        st.tree_edges.add(eid)
        st.tree_nodes.add(v)
        st.mark_counts[eid] = st.mark_counts.get(eid, 0) + 1
        st.current = v

        if v in st.remaining:
            st.remaining.discard(v)
            path = tree_path(self.topo, st.tree_edges, self._active_subgoal, v)
            assert path, "completed subgoal must have a fork-to-destination path"
            r_goal = reward_goal(cfg, self._bw_n, self._delay_n, self._loss_n, path)
            r_ex = r_goal
            if not st.remaining:
                tree = self.final_tree()
                assert tree is not None
                r_ex += reward_finish(cfg, self.topo, tree, self._bw_n, self._delay_n, self._loss_n)
            self._active_subgoal = None
            return self._outcome(FRESH_EDGE, v, r_goal, r_ex, True)

        r_in = reward_step(cfg, self._bw_n, self._delay_n, self._loss_n, eid)
        return self._outcome(FRESH_EDGE, v, r_in, None, False)

    def final_tree(self) -> MulticastTree | None:
        """Union of source-to-destination paths over covered destinations.

        Dead branches drop out automatically, so the result never has stray
        leaves. None while no destination is covered yet.
        """
        self._require_reset()
        st = self.state
        covered = self._destinations - st.remaining
        if not covered:
            return None
        edges: set[int] = set()
        for d in sorted(covered):
            p = tree_path(self.topo, st.tree_edges, self._source, d)
            assert p is not None, "covered destination must stay connected to the source"
            edges.update(p)
        return MulticastTree.create(self._source, covered, edges)

    # -- internals ------------------------------------------------------------

    def _outcome(
        self, scenario: int, moved_to: int | None, r_in: float, r_ex: float | None, subgoal_done: bool
    ) -> StepOutcome:
        return StepOutcome(
            scenario=scenario,
            moved_to=moved_to,
            r_in=r_in,
            r_ex=r_ex,
            subgoal_done=subgoal_done,
            episode_done=self.done,
            truncated=self.truncated,
        )

    def _require_reset(self) -> None:
        if self.state is None:
            raise ProtocolError("environment not reset")
