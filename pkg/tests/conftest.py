import numpy as np
import pytest

from graphrom.data import SignalTable, SnapshotDataset
from graphrom.mesh import MeshGraph


def grid_graph(rows, cols):
    coords = np.array([(i, j) for i in range(rows) for j in range(cols)], dtype=np.float64)
    edges = [(cols * i + j, cols * i + j + 1) for i in range(rows) for j in range(cols - 1)]
    edges += [(cols * i + j, cols * (i + 1) + j) for i in range(rows - 1) for j in range(cols)]
    return MeshGraph(coords=coords, edges=np.asarray(edges, dtype=np.int64))


@pytest.fixture
def graph9():
    return grid_graph(3, 3)


def random_dataset(graph, n_sim=4, n_t=6, d_mu=2, d_u=1, seed=0, constant_mu=True):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 0.5, n_t)
    signals = []
    for i in range(n_sim):
        if constant_mu:
            mu = np.tile(rng.uniform(-1, 1, d_mu), (n_t, 1))
        else:
            mu = rng.uniform(-1, 1, (n_t, d_mu))
        signals.append(SignalTable(i, times, mu))
    fields = rng.normal(size=(n_sim, n_t, graph.num_nodes, d_u))
    return SnapshotDataset(mesh=graph, signals=signals, fields_u=fields)


@pytest.fixture
def dataset9(graph9):
    return random_dataset(graph9)
