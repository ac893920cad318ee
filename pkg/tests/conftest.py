import numpy as np
import pytest

from gtcausin.graph import SensorGraph


def random_graph(n: int, rng: np.random.Generator, density: float = 0.5) -> SensorGraph:
    """Directed graph with unit diagonal and random edge weights in (0, 1]."""
    adj = np.where(rng.random((n, n)) < density, rng.uniform(0.05, 1.0, (n, n)), 0.0)
    np.fill_diagonal(adj, 1.0)
    return SensorGraph(adj, [f"n{k}" for k in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
