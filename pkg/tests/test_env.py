import numpy as np
import pytest

from mcroute.env import (
    CYCLE_EDGE,
    FRESH_EDGE,
    NONE_SLOT,
    TREE_EDGE,
    MulticastEnv,
    ProtocolError,
    RewardConfig,
    reward_finish,
    reward_goal,
    reward_step,
)
from mcroute.encoding import normalized_edge_metrics
from mcroute.topology import NliSnapshot, validate_tree


def flat_snapshot(topo):
    # identical metrics everywhere -> every normalized value is 0.5
    m = topo.edge_count
    return NliSnapshot.create(topo, 0, [50.0] * m, [2.0] * m, [0.01] * m)


@pytest.fixture
def env(example7):
    return MulticastEnv(example7)


def slot_of(topo, at, to):
    for k, (v, _) in enumerate(topo.neighbors(at)):
        if v == to:
            return k
    raise AssertionError(f"{to} not adjacent to {at}")


class TestProtocol:
    def test_requires_reset_then_subgoal(self, env, example7):
        with pytest.raises(ProtocolError):
            env.meta_state()
        env.reset(flat_snapshot(example7), 1, [4, 7])
        with pytest.raises(ProtocolError, match="no active subgoal"):
            env.step(0)

    def test_reset_validation(self, env, example7):
        snap = flat_snapshot(example7)
        with pytest.raises(ValueError, match="source"):
            env.reset(snap, 0, [4])
        with pytest.raises(ValueError, match="destination"):
            env.reset(snap, 1, [])
        with pytest.raises(ValueError, match="destination"):
            env.reset(snap, 1, [1, 4])
        with pytest.raises(ValueError, match="outside"):
            env.reset(snap, 1, [9])

    def test_action_range_checked(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4])
        env.subgoal_step(1)
        with pytest.raises(ValueError, match="action"):
            env.step(4)  # max degree is 4 -> slots 0..3
        with pytest.raises(ValueError, match="action"):
            env.step(-1)


class TestForkSets:
    def test_fork_sets_evolve_along_construction(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        assert env.legal_forks() == frozenset({1})

        assert env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        out = env.step(slot_of(example7, 2, 4))
        assert out.subgoal_done and not out.episode_done
        assert env.legal_forks() == frozenset({1, 2, 4})

        assert env.subgoal_step(2)
        env.step(slot_of(example7, 2, 3))
        env.step(slot_of(example7, 3, 5))
        out = env.step(slot_of(example7, 5, 7))
        assert out.subgoal_done and out.episode_done
        assert env.legal_forks() == frozenset({1, 2, 3, 4, 5, 7})

    def test_illegal_subgoal_counts_strike_without_mutation(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        before = env.state.copy()
        assert not env.subgoal_step(5)
        assert env.illegal_subgoals == 1
        assert env.state == before
        assert env.legal_forks() == frozenset({1})

    def test_strike_budget_truncates(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        for _ in range(env.strike_cap):
            assert not env.subgoal_step(6)
        assert env.truncated
        with pytest.raises(ProtocolError, match="truncated"):
            env.subgoal_step(1)


class TestScenarios:
    def test_fresh_edge_grows_tree(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        out = env.step(slot_of(example7, 1, 2))
        assert out.scenario == FRESH_EDGE
        assert out.moved_to == 2
        assert not out.subgoal_done
        e12 = example7.edge_id(1, 2)
        assert e12 in env.state.tree_edges
        assert env.state.mark_counts[e12] == 1
        assert env.state.current == 2

    def test_none_slot_leaves_state_bit_identical(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        before_state = env.state.copy()
        before_meta = env.meta_state()
        before_intr = env.intrinsic_state()
        out = env.step(3)  # node 1 has degree 1; slot 3 is empty
        assert out.scenario == NONE_SLOT
        assert out.moved_to is None
        assert out.r_in == env.reward_cfg.none_slot_penalty
        assert env.state == before_state
        assert np.array_equal(env.meta_state(), before_meta)
        assert np.array_equal(env.intrinsic_state(), before_intr)
        assert env.intrinsic_steps == 1  # budget still ticks

    def test_tree_edge_walk_stacks_mark(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        out = env.step(slot_of(example7, 2, 1))  # back along the tree edge
        assert out.scenario == TREE_EDGE
        assert out.moved_to == 1
        assert out.r_in == env.reward_cfg.revisit_penalty
        e12 = example7.edge_id(1, 2)
        assert env.state.mark_counts[e12] == 2
        assert env.state.tree_edges == {e12}
        assert env.state.current == 1

    def test_cycle_edge_traversed_but_not_adopted(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))  # completes subgoal at 4
        env.subgoal_step(2)
        env.step(slot_of(example7, 2, 3))
        out = env.step(slot_of(example7, 3, 4))  # 4 already on the tree
        assert out.scenario == CYCLE_EDGE
        assert out.moved_to == 4
        assert out.r_in == env.reward_cfg.revisit_penalty
        e34 = example7.edge_id(3, 4)
        assert e34 not in env.state.tree_edges
        assert env.state.mark_counts[e34] == 1
        assert env.state.current == 4

    def test_step_budget_truncates(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        for _ in range(env.step_cap):
            env.step(3)  # hammer the empty slot
        assert env.truncated
        with pytest.raises(ProtocolError, match="truncated"):
            env.step(0)


class TestRewards:
    def test_flat_metrics_give_midscale_rewards(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        out = env.step(slot_of(example7, 1, 2))
        # all normalized metrics 0.5: quality = (0.5 + 0.5 + 0.5) / 3 = 0.5
        assert out.r_in == pytest.approx(0.005, abs=1e-12)

    def test_single_best_edge_path_scores_one(self, example7):
        # edge (1,2) dominates every metric; normalization puts it at the top
        m = example7.edge_count
        bw = [100.0] + [10.0] * (m - 1)
        delay = [0.5] + [5.0] * (m - 1)
        loss = [0.0] + [0.1] * (m - 1)
        snap = NliSnapshot.create(example7, 0, bw, delay, loss)
        env = MulticastEnv(example7)
        env.reset(snap, 1, [2])
        env.subgoal_step(1)
        out = env.step(slot_of(example7, 1, 2))
        assert out.subgoal_done and out.episode_done
        # r_in carries the subgoal reward; r_ex additionally the finish bonus
        assert out.r_in == pytest.approx(1.0, abs=1e-12)
        assert out.r_ex == pytest.approx(2.0, abs=1e-12)

    def test_subgoal_reward_aggregates_path(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        out = env.step(slot_of(example7, 2, 4))
        assert out.subgoal_done
        # two-edge path under flat 0.5 metrics:
        # bw 0.5, delay 1.0, loss 1 - 0.25 = 0.75 -> (0.5 + 0 + 0.25) / 3
        want = (0.5 + (1 - 1.0) + (1 - 0.75)) / 3
        assert out.r_in == pytest.approx(want, abs=1e-12)
        assert out.r_ex == pytest.approx(want, abs=1e-12)

    def test_finish_bonus_added_on_completion(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))
        env.subgoal_step(2)
        env.step(slot_of(example7, 2, 3))
        env.step(slot_of(example7, 3, 5))
        out = env.step(slot_of(example7, 5, 7))
        assert out.episode_done
        tree = env.final_tree()
        bw_n, delay_n, loss_n = normalized_edge_metrics(flat_snapshot(example7))
        goal = reward_goal(env.reward_cfg, bw_n, delay_n, loss_n,
                           [example7.edge_id(2, 3), example7.edge_id(3, 5), example7.edge_id(5, 7)])
        finish = reward_finish(env.reward_cfg, example7, tree, bw_n, delay_n, loss_n)
        assert out.r_ex == pytest.approx(goal + finish, abs=1e-12)
        assert out.r_in == pytest.approx(goal, abs=1e-12)

    def test_reward_goal_rejects_empty_path(self):
        with pytest.raises(ValueError):
            reward_goal(RewardConfig(), np.array([1.0]), np.array([0.0]), np.array([0.0]), [])

    def test_reward_step_formula(self, example7, example7_snapshot):
        cfg = RewardConfig()
        bw_n, delay_n, loss_n = normalized_edge_metrics(example7_snapshot)
        got = reward_step(cfg, bw_n, delay_n, loss_n, 3)
        want = 0.01 * (bw_n[3] + (1 - delay_n[3]) + (1 - loss_n[3])) / 3
        assert got == pytest.approx(want, abs=1e-15)


class TestFinalTree:
    def test_completed_tree_is_valid_and_pruned(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))
        env.subgoal_step(2)
        env.step(slot_of(example7, 2, 3))
        env.step(slot_of(example7, 3, 6))  # detour: grows a dead branch to 6
        env.subgoal_step(3)
        env.step(slot_of(example7, 3, 5))
        out = env.step(slot_of(example7, 5, 7))
        assert out.episode_done
        tree = env.final_tree()
        rep = validate_tree(example7, tree)
        assert rep.valid, rep.failures
        # the dead branch to 6 is not part of any source-destination path
        assert example7.edge_id(3, 6) not in tree.edges
        assert tree.destinations == frozenset({4, 7})

    def test_partial_tree_covers_reached_subset(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        assert env.final_tree() is None
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))
        tree = env.final_tree()
        assert tree is not None
        assert tree.destinations == frozenset({4})
        assert validate_tree(example7, tree).valid

    def test_remaining_never_intersects_tree(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))
        assert env.state.remaining == {7}
        assert env.state.remaining & env.state.tree_nodes == set()


class TestObservations:
    def test_meta_and_intrinsic_shapes(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        assert env.meta_state().shape == (4, 7, 7)
        env.subgoal_step(1)
        assert env.intrinsic_state().shape == (5, 7, 7)

    def test_tree_channel_tracks_position_and_marks(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        meta = env.meta_state()
        assert meta[0, 0, 0] == 0.5
        assert np.count_nonzero(meta[0]) == 1
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        meta = env.meta_state()
        assert meta[0, 1, 1] == 0.5  # position moved to node 2
        assert meta[0, 0, 0] == 0.0
        assert meta[0, 0, 1] == 1.0 and meta[0, 1, 0] == 1.0

    def test_goal_channel_accumulates_fork_picks(self, env, example7):
        env.reset(flat_snapshot(example7), 1, [4, 7])
        env.subgoal_step(1)
        env.step(slot_of(example7, 1, 2))
        env.step(slot_of(example7, 2, 4))
        env.subgoal_step(2)
        intr = env.intrinsic_state()
        assert intr[4, 0, 0] == 1.0  # fork 1 picked once
        assert intr[4, 1, 1] == 1.0  # fork 2 picked once
        assert np.count_nonzero(intr[4]) == 2
