import numpy as np
import pytest

from mcroute.topology import NliSnapshot, Topology, default_topology


@pytest.fixture
def example7() -> Topology:
    # 7-node testbed: max degree 4 (node 3), stub nodes 1, 6, 7
    edges = [
        (1, 2, 100.0, 1.0),
        (2, 3, 100.0, 2.0),
        (2, 4, 100.0, 1.5),
        (3, 4, 100.0, 1.0),
        (3, 5, 100.0, 2.5),
        (3, 6, 100.0, 1.0),
        (5, 7, 100.0, 3.0),
    ]
    return Topology(7, edges)


@pytest.fixture
def example7_snapshot(example7: Topology) -> NliSnapshot:
    return NliSnapshot.create(
        example7,
        snapshot_id=0,
        bw=[90.0, 80.0, 70.0, 100.0, 60.0, 85.0, 95.0],
        delay=[1.0, 2.0, 1.5, 1.0, 2.5, 1.0, 3.0],
        loss=[0.01, 0.02, 0.0, 0.01, 0.05, 0.0, 0.1],
    )


@pytest.fixture
def bundled14() -> Topology:
    return default_topology()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
