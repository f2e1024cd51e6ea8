import math

import numpy as np
import pytest

from mcroute.replay import ReplayBuffer, SumTree, Transition


def tr(tag: float, terminal: bool = False) -> Transition:
    state = np.full((2, 2), tag)
    return Transition(state=state, action=0, reward=tag, next_state=None if terminal else state)


class TestSumTree:
    def test_set_and_total(self):
        t = SumTree(4)
        t.set(0, 1.0)
        t.set(1, 3.0)
        assert t.total == 4.0
        assert t.leaf(0) == 1.0
        t.set(0, 2.0)
        assert t.total == 5.0

    def test_find_partitions_mass(self):
        t = SumTree(4)
        for i, p in enumerate([1.0, 3.0, 2.0, 4.0]):
            t.set(i, p)
        assert t.find(0.5) == 0
        assert t.find(1.5) == 1
        assert t.find(4.0) == 1
        assert t.find(4.5) == 2
        assert t.find(9.9) == 3

    def test_non_power_of_two_capacity(self):
        t = SumTree(5)
        for i in range(5):
            t.set(i, float(i + 1))
        assert t.total == 15.0
        counts = [t.find(x) for x in np.linspace(0.01, 14.99, 200)]
        assert set(counts) == {0, 1, 2, 3, 4}

    def test_rejects_bad_values(self):
        t = SumTree(2)
        with pytest.raises(ValueError):
            t.set(0, -1.0)
        with pytest.raises(ValueError):
            t.set(0, math.inf)
        with pytest.raises(IndexError):
            t.set(2, 1.0)

    def test_internal_nodes_exact_after_many_ops(self, rng):
        t = SumTree(257)  # odd size exercises the last partial level
        for _ in range(20000):
            t.set(int(rng.integers(0, 257)), float(rng.uniform(0, 10)))
        # every parent equals its children exactly
        for node in range(256):
            assert t.nodes[node] == t.nodes[2 * node + 1] + t.nodes[2 * node + 2]
        assert t.total == pytest.approx(float(np.sum(t.leaves())), abs=1e-9)


class TestPush:
    def test_first_push_gets_unit_priority(self):
        buf = ReplayBuffer(8, alpha=0.6, rng=np.random.default_rng(0))
        buf.push(tr(1.0))
        assert buf.raw_priority(0) == 1.0
        assert len(buf) == 1

    def test_push_adopts_current_max(self):
        buf = ReplayBuffer(8, alpha=1.0, rng=np.random.default_rng(0))
        buf.push(tr(1.0))
        buf.push(tr(2.0))
        buf.update_priorities(np.array([0]), np.array([3.0]))
        buf.push(tr(3.0))
        assert buf.raw_priority(2) == pytest.approx(3.0 + buf.priority_eps)

    def test_ring_eviction(self):
        buf = ReplayBuffer(4, rng=np.random.default_rng(0))
        for k in range(6):
            buf.push(tr(float(k)))
        assert len(buf) == 4
        stored = sorted(t.reward for t in buf._storage)
        assert stored == [2.0, 3.0, 4.0, 5.0]


class TestSampling:
    def test_requires_enough_transitions(self):
        buf = ReplayBuffer(8, rng=np.random.default_rng(0))
        buf.push(tr(1.0))
        with pytest.raises(ValueError, match="at least"):
            buf.sample(2, beta=0.4)

    def test_probabilities_follow_alpha_one(self):
        # seed 2 puts one draw in each leaf, making the batch {0, 1}
        buf = ReplayBuffer(2, alpha=1.0, rng=np.random.default_rng(2))
        buf.push(tr(0.0))
        buf.push(tr(1.0))
        buf.update_priorities(np.array([0, 1]), np.array([1.0 - 1e-6, 3.0 - 1e-6]))
        # P = (0.25, 0.75)
        assert buf.tree.leaf(0) / buf.tree.total == pytest.approx(0.25, abs=1e-12)
        batch = buf.sample(2, beta=1.0)
        by_index = {int(i): w for i, w in zip(batch.indices, batch.weights)}
        assert set(by_index) == {0, 1}
        # weights: (N * P)^-1 -> (2.0, 2/3), normalized -> (1.0, 1/3)
        assert by_index[0] == pytest.approx(1.0, abs=1e-9)
        assert by_index[1] == pytest.approx(1 / 3, rel=1e-9)

    def test_alpha_zero_is_uniform(self):
        buf = ReplayBuffer(4, alpha=0.0, rng=np.random.default_rng(3))
        for k in range(4):
            buf.push(tr(float(k)))
        buf.update_priorities(np.arange(4), np.array([0.1, 1.0, 10.0, 100.0]))
        leaves = buf.tree.leaves()[:4]
        assert np.allclose(leaves, 1.0)
        batch = buf.sample(4, beta=1.0)
        assert np.allclose(batch.weights, 1.0)

    def test_alpha_exponent_applied(self):
        buf = ReplayBuffer(2, alpha=0.6, rng=np.random.default_rng(0))
        buf.push(tr(0.0))
        buf.push(tr(1.0))
        buf.update_priorities(np.array([0, 1]), np.array([1.0 - 1e-6, 3.0 - 1e-6]))
        want0 = 1.0**0.6
        want1 = 3.0**0.6
        assert buf.tree.leaf(0) == pytest.approx(want0, rel=1e-12)
        assert buf.tree.leaf(1) == pytest.approx(want1, rel=1e-12)

    def test_update_priority_eps_rule(self):
        buf = ReplayBuffer(2, alpha=1.0, rng=np.random.default_rng(0))
        buf.push(tr(0.0))
        buf.update_priorities(np.array([0]), np.array([-0.2]))
        assert buf.raw_priority(0) == pytest.approx(0.200001, abs=1e-12)
        with pytest.raises(IndexError):
            buf.update_priorities(np.array([1]), np.array([0.1]))

    def test_empirical_frequencies_track_priorities(self):
        buf = ReplayBuffer(4, alpha=1.0, rng=np.random.default_rng(11))
        for k in range(4):
            buf.push(tr(float(k)))
        pri = np.array([1.0, 2.0, 3.0, 4.0])
        buf.update_priorities(np.arange(4), pri - buf.priority_eps)
        counts = np.zeros(4)
        draws = 20000
        for _ in range(draws // 4):
            for idx in buf.sample(4, beta=0.4).indices:
                counts[idx] += 1
        expect = pri / pri.sum()
        observed = counts / draws
        assert np.all(np.abs(observed - expect) / expect < 0.1)

    def test_weights_counteract_bias_at_beta_one(self):
        buf = ReplayBuffer(8, alpha=1.0, rng=np.random.default_rng(2))
        for k in range(8):
            buf.push(tr(float(k)))
        buf.update_priorities(np.arange(8), np.linspace(0.5, 4.0, 8))
        batch = buf.sample(6, beta=1.0)
        probs = np.array([buf.tree.leaf(int(i)) for i in batch.indices]) / buf.tree.total
        raw = (len(buf) * probs) ** -1.0
        assert np.allclose(batch.weights, raw / raw.max(), rtol=1e-12)

    def test_terminal_transitions_round_trip(self):
        buf = ReplayBuffer(2, rng=np.random.default_rng(0))
        buf.push(tr(1.0, terminal=True))
        buf.push(tr(2.0))
        got = buf.sample(2, beta=0.4).transitions
        terminals = {t.reward: t.terminal for t in got}
        assert terminals[1.0] is True
        assert terminals[2.0] is False

    def test_rejects_non_finite_reward(self):
        state = np.zeros((2, 2))
        for bad in (float("inf"), float("-inf"), float("nan")):
            with pytest.raises(ValueError, match="finite"):
                Transition(state=state, action=0, reward=bad, next_state=None)
