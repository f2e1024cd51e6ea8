"""Two-level DQN training over the tree-construction environment.

The subgoal controller proposes fork nodes from 4-channel states; the edge
controller grows paths from 5-channel states. Both learn off-policy from
prioritized replay with target networks, one gradient step per interaction,
and share a single exponentially decaying exploration rate indexed by episode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .env import MulticastEnv, RewardConfig
from .qnet import (
    Adam,
    NetSpec,
    NumericsError,
    QNetwork,
    controller_specs,
    huber_grad,
    td_targets,
    weighted_huber_loss,
)
from .replay import ReplayBuffer, Transition
from .topology import MulticastTree, NliSnapshot, Topology


@dataclass(frozen=True)
class PerConfig:
    capacity: int = 2048
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_final: float = 1.0
    priority_eps: float = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 4000
    batch_size: int = 32
    gamma: float = 0.9
    lr: float = 1e-4
    eps_start: float = 1.0
    eps_final: float = 0.05
    eps_decay_epochs: float = 500.0
    # fork-controller schedule; None fields fall back to the shared values
    meta_eps_start: float | None = None
    meta_eps_final: float | None = None
    meta_eps_decay_epochs: float | None = None
    target_sync_every: int = 10  # learn steps between target refreshes
    step_cap_factor: int = 8
    strike_cap_factor: int = 4
    seed: int = 0
    # pin the fork node to the source; used for single-destination tuning runs
    force_source_subgoal: bool = False
    reward: RewardConfig = field(default_factory=RewardConfig)
    per: PerConfig = field(default_factory=PerConfig)

    def to_dict(self) -> dict:
        d = {
            "episodes": self.episodes,
            "batch_size": self.batch_size,
            "gamma": self.gamma,
            "lr": self.lr,
            "eps_start": self.eps_start,
            "eps_final": self.eps_final,
            "eps_decay_epochs": self.eps_decay_epochs,
            "meta_eps_start": self.meta_eps_start,
            "meta_eps_final": self.meta_eps_final,
            "meta_eps_decay_epochs": self.meta_eps_decay_epochs,
            "target_sync_every": self.target_sync_every,
            "step_cap_factor": self.step_cap_factor,
            "strike_cap_factor": self.strike_cap_factor,
            "seed": self.seed,
            "force_source_subgoal": self.force_source_subgoal,
            "reward": {
                "beta_bw": self.reward.beta_bw,
                "beta_delay": self.reward.beta_delay,
                "beta_loss": self.reward.beta_loss,
                "step_scale": self.reward.step_scale,
                "illegal_subgoal_penalty": self.reward.illegal_subgoal_penalty,
                "none_slot_penalty": self.reward.none_slot_penalty,
                "revisit_penalty": self.reward.revisit_penalty,
            },
            "per": {
                "capacity": self.per.capacity,
                "alpha": self.per.alpha,
                "beta_start": self.per.beta_start,
                "beta_final": self.per.beta_final,
                "priority_eps": self.per.priority_eps,
            },
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        reward = RewardConfig(**d.pop("reward", {}))
        per = PerConfig(**d.pop("per", {}))
        allowed = {
            "episodes", "batch_size", "gamma", "lr", "eps_start", "eps_final",
            "eps_decay_epochs", "meta_eps_start", "meta_eps_final",
            "meta_eps_decay_epochs", "target_sync_every", "step_cap_factor",
            "strike_cap_factor", "seed", "force_source_subgoal",
        }
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(reward=reward, per=per, **d)


def epsilon(epoch: int, eps_start: float, eps_final: float, decay_epochs: float) -> float:
    """Exponential anneal: eps_final + (eps_start - eps_final) * exp(-epoch/decay)."""
    return eps_final + (eps_start - eps_final) * float(np.exp(-epoch / decay_epochs))


def select_action(q_row: np.ndarray, eps: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy over one Q row; greedy ties resolve to the lowest index."""
    if rng.random() < eps:
        return int(rng.integers(0, len(q_row)))
    return int(np.argmax(q_row))


@dataclass(frozen=True)
class EpisodeStats:
    episode: int
    eps_intr: float
    eps_meta: float
    reward_in_sum: float
    reward_ex_sum: float
    loss_intr_mean: float  # nan until the buffer warms up
    loss_meta_mean: float
    intr_learn_steps: int
    meta_learn_steps: int
    intrinsic_steps: int
    illegal_subgoals: int
    completed: bool
    truncated: bool
    subgoal_picks: tuple[int, ...]


@dataclass(frozen=True)
class TrainReport:
    episodes: list[EpisodeStats]
    final_trees: dict[int, "ExtractionResult"]  # greedy rollout per snapshot id
    wall_clock_s: float
    config: TrainConfig


@dataclass(frozen=True)
class TrainResult:
    meta_net: QNetwork
    intr_net: QNetwork
    report: TrainReport


class _Learner:
    """One controller's learning state: policy/target nets, optimizer, replay."""

    def __init__(self, spec: NetSpec, cfg: TrainConfig, init_rng: np.random.Generator,
                 per_rng: np.random.Generator, label: str = "controller"):
        self.policy = QNetwork.create(spec, init_rng)
        self.target = self.policy.copy()
        self.opt = Adam(self.policy.params, lr=cfg.lr)
        self.buffer = ReplayBuffer(
            cfg.per.capacity, alpha=cfg.per.alpha,
            priority_eps=cfg.per.priority_eps, rng=per_rng,
        )
        self.cfg = cfg
        self.label = label
        self.learn_steps = 0

    def learn(self, beta: float) -> float | None:
        """One prioritized batch update; None while the buffer is short."""
        cfg = self.cfg
        if len(self.buffer) < cfg.batch_size:
            return None
        batch = self.buffer.sample(cfg.batch_size, beta)
        states = np.stack([t.state for t in batch.transitions])
        actions = np.array([t.action for t in batch.transitions], dtype=np.intp)
        rewards = [t.reward for t in batch.transitions]
        next_states = [t.next_state for t in batch.transitions]

        y = td_targets(rewards, next_states, cfg.gamma, self.target)
        q, cache = self.policy.forward_cached(states)
        rows = np.arange(len(actions))
        taken = q[rows, actions]
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(taken))):
            raise NumericsError(
                f"{self.label}: non-finite TD values at learn step {self.learn_steps}")
        self.buffer.update_priorities(batch.indices, taken - y)
        loss = weighted_huber_loss(taken, y, batch.weights)
        if not np.isfinite(loss):
            raise NumericsError(
                f"{self.label}: non-finite loss at learn step {self.learn_steps}")

        dq = np.zeros_like(q)
        dq[rows, actions] = batch.weights * huber_grad(taken, y) / len(actions)
        grads = self.policy.backward(cache, dq)
        self.opt.step(self.policy.params, grads)

        self.learn_steps += 1
        if self.learn_steps % cfg.target_sync_every == 0:
            self.target.sync_from(self.policy)
        return loss


def train(
    topo: Topology,
    snapshots: Sequence[NliSnapshot],
    source: int,
    destinations: Iterable[int],
    cfg: TrainConfig | None = None,
    max_wall_clock_s: float | None = None,
) -> TrainResult:
    """Run the full two-level training loop; deterministic for a fixed config.

    `max_wall_clock_s` stops cleanly after the episode in which the budget
    runs out; the report then carries fewer rows than cfg.episodes.
    """
    cfg = cfg or TrainConfig()
    dests = sorted(set(destinations))
    if not snapshots:
        raise ValueError("need at least one snapshot")

    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_meta_init = np.random.default_rng(seeds[0])
    rng_intr_init = np.random.default_rng(seeds[1])
    rng_action = np.random.default_rng(seeds[2])
    rng_per_meta = np.random.default_rng(seeds[3])
    rng_per_intr = np.random.default_rng(seeds[4])

    meta_spec, intr_spec = controller_specs(topo.node_count, topo.max_degree)
    meta = _Learner(meta_spec, cfg, rng_meta_init, rng_per_meta, label="fork controller")
    intr = _Learner(intr_spec, cfg, rng_intr_init, rng_per_intr, label="edge controller")

    env = MulticastEnv(
        topo, reward_cfg=cfg.reward,
        step_cap_factor=cfg.step_cap_factor, strike_cap_factor=cfg.strike_cap_factor,
    )

    stats: list[EpisodeStats] = []

    def _learn(learner: _Learner, beta: float) -> float | None:
        # on a numerics fault, attach a parameter snapshot for diagnostics
        try:
            return learner.learn(beta)
        except NumericsError as e:
            e.arrays = {f"meta_{k}": v.copy() for k, v in meta.policy.params.items()}
            e.arrays.update({f"intr_{k}": v.copy() for k, v in intr.policy.params.items()})
            e.context = {"episode": len(stats), "faulting": learner.label}
            raise

    start = time.perf_counter()
    denom = max(1, cfg.episodes - 1)

    m_start = cfg.meta_eps_start if cfg.meta_eps_start is not None else cfg.eps_start
    m_final = cfg.meta_eps_final if cfg.meta_eps_final is not None else cfg.eps_final
    m_decay = (cfg.meta_eps_decay_epochs if cfg.meta_eps_decay_epochs is not None
               else cfg.eps_decay_epochs)

    for episode in range(cfg.episodes):
        eps_intr = epsilon(episode, cfg.eps_start, cfg.eps_final, cfg.eps_decay_epochs)
        eps_meta = epsilon(episode, m_start, m_final, m_decay)
        beta = cfg.per.beta_start + (cfg.per.beta_final - cfg.per.beta_start) * episode / denom

        r_in_sum = 0.0
        r_ex_sum = 0.0
        intr_losses: list[float] = []
        meta_losses: list[float] = []
        picks = [0] * topo.node_count
        completed = True
        truncated = False
        steps_total = 0
        strikes_total = 0

        for snap in snapshots:
            env.reset(snap, source, dests)
            while not env.done and not env.truncated:
                meta_state = env.meta_state()
                if cfg.force_source_subgoal:
                    g = source
                    env.subgoal_step(g)
                    picks[g - 1] += 1
                else:
                    q_meta = meta.policy.forward(meta_state[None])[0]
                    g = select_action(q_meta, eps_meta, rng_action) + 1
                    picks[g - 1] += 1
                    if not env.subgoal_step(g):
                        # illegal fork: penalized self-transition, then learn
                        meta.buffer.push(Transition(
                            state=meta_state, action=g - 1,
                            reward=cfg.reward.illegal_subgoal_penalty,
                            next_state=meta_state.copy(),
                        ))
                        loss = _learn(meta, beta)
                        if loss is not None:
                            meta_losses.append(loss)
                        continue

                while True:
                    intr_state = env.intrinsic_state()
                    q_intr = intr.policy.forward(intr_state[None])[0]
                    a = select_action(q_intr, eps_intr, rng_action)
                    out = env.step(a)
                    r_in_sum += out.r_in
                    next_state = None if out.subgoal_done else env.intrinsic_state()
                    intr.buffer.push(Transition(
                        state=intr_state, action=a, reward=out.r_in, next_state=next_state,
                    ))
                    loss = _learn(intr, beta)
                    if loss is not None:
                        intr_losses.append(loss)

                    if out.subgoal_done:
                        r_ex_sum += out.r_ex
                        if not cfg.force_source_subgoal:
                            meta.buffer.push(Transition(
                                state=meta_state, action=g - 1, reward=out.r_ex,
                                next_state=None if out.episode_done else env.meta_state(),
                            ))
                            loss = _learn(meta, beta)
                            if loss is not None:
                                meta_losses.append(loss)
                        break
                    if env.truncated or env.done:
                        break

            steps_total += env.intrinsic_steps
            strikes_total += env.illegal_subgoals
            completed = completed and env.done
            truncated = truncated or env.truncated

        stats.append(EpisodeStats(
            episode=episode,
            eps_intr=eps_intr,
            eps_meta=eps_meta,
            reward_in_sum=r_in_sum,
            reward_ex_sum=r_ex_sum,
            loss_intr_mean=float(np.mean(intr_losses)) if intr_losses else float("nan"),
            loss_meta_mean=float(np.mean(meta_losses)) if meta_losses else float("nan"),
            intr_learn_steps=intr.learn_steps,
            meta_learn_steps=meta.learn_steps,
            intrinsic_steps=steps_total,
            illegal_subgoals=strikes_total,
            completed=completed,
            truncated=truncated,
            subgoal_picks=tuple(picks),
        ))
        if max_wall_clock_s is not None and time.perf_counter() - start > max_wall_clock_s:
            break

    final_trees = {
        snap.snapshot_id: extract_tree(
            meta.policy, intr.policy, topo, snap, source, dests,
            reward_cfg=cfg.reward, step_cap_factor=cfg.step_cap_factor,
        )
        for snap in snapshots
    }

    report = TrainReport(
        episodes=stats,
        final_trees=final_trees,
        wall_clock_s=time.perf_counter() - start,
        config=cfg,
    )
    return TrainResult(meta_net=meta.policy, intr_net=intr.policy, report=report)


@dataclass(frozen=True)
class ExtractionResult:
    tree: MulticastTree | None
    completed: bool
    reason: str | None
    intrinsic_steps: int
    reward_ex_total: float

    @property
    def failed(self) -> bool:
        return self.tree is None


def extract_tree(
    meta_net: QNetwork,
    intr_net: QNetwork,
    topo: Topology,
    snap: NliSnapshot,
    source: int,
    destinations: Iterable[int],
    reward_cfg: RewardConfig | None = None,
    step_cap_factor: int = 8,
) -> ExtractionResult:
    """Greedy rollout of both controllers; never returns an invalid tree.

    Fork choices are masked to the legal set; edge choices are masked to real
    adjacency slots. If the step budget runs out before every destination is
    covered, the result reports a failure instead of a partial tree.
    """
    env = MulticastEnv(topo, reward_cfg=reward_cfg, step_cap_factor=step_cap_factor)
    env.reset(snap, source, destinations)
    r_ex_total = 0.0

    while not env.done and not env.truncated:
        q_meta = meta_net.forward(env.meta_state()[None])[0]
        masked = np.full_like(q_meta, -np.inf)
        for node in env.legal_forks():
            masked[node - 1] = q_meta[node - 1]
        g = int(np.argmax(masked)) + 1
        env.subgoal_step(g)

        while True:
            q_intr = intr_net.forward(env.intrinsic_state()[None])[0]
            degree = topo.degree(env.state.current)
            masked_q = np.full_like(q_intr, -np.inf)
            masked_q[:degree] = q_intr[:degree]
            out = env.step(int(np.argmax(masked_q)))
            if out.subgoal_done:
                r_ex_total += out.r_ex
                break
            if env.truncated or env.done:
                break

    if not env.done:
        return ExtractionResult(
            tree=None, completed=False, reason="step budget exhausted",
            intrinsic_steps=env.intrinsic_steps, reward_ex_total=r_ex_total,
        )
    tree = env.final_tree()
    return ExtractionResult(
        tree=tree, completed=True, reason=None,
        intrinsic_steps=env.intrinsic_steps, reward_ex_total=r_ex_total,
    )
