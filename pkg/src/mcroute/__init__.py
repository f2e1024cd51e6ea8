"""Multicast routing on simulated SDN link-state snapshots.

Provides a link-state simulator, classic Steiner-tree baselines, an exact
oracle, and a hierarchical DQN agent that builds multicast trees by picking
fork-node subgoals and growing per-subgoal paths edge by edge.
"""

__version__ = "0.1.0"
