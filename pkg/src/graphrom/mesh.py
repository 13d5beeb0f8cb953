"""Mesh-as-graph representation with neighbor indexing and edge pseudo-coordinates."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GeometryError, ValidationError


def build_neighbor_index(edges, num_nodes):
    """Build per-node sorted neighbor lists from an undirected edge list.

    Edges are unordered pairs, each listed once.  Raises ValidationError on
    out-of-range indices, self-loops, or duplicates, naming the offending edge.
    """
    neighbors = [set() for _ in range(num_nodes)]
    seen = set()
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise ValidationError(f"edge ({i}, {j}) has an index outside [0, {num_nodes})")
        if i == j:
            raise ValidationError(f"edge ({i}, {j}) is a self-loop")
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ValidationError(f"edge ({i}, {j}) is a duplicate")
        seen.add(key)
        neighbors[i].add(j)
        neighbors[j].add(i)
    return [sorted(n) for n in neighbors]


@dataclass
class MeshGraph:
    """Node coordinates plus undirected connectivity.

    coords has shape (num_nodes, dim); edges is an (n_edges, 2) int array with
    the smaller index first, each undirected edge stored once.
    """

    coords: np.ndarray
    edges: np.ndarray
    neighbor_index: list = field(default=None, repr=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        lo = np.minimum(self.edges[:, 0], self.edges[:, 1])
        hi = np.maximum(self.edges[:, 0], self.edges[:, 1])
        order = np.lexsort((hi, lo))
        self.edges = np.stack([lo, hi], axis=1)[order]
        if self.neighbor_index is None:
            self.neighbor_index = build_neighbor_index(self.edges, self.num_nodes)
        self._check_connected()

    @property
    def num_nodes(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def degrees(self):
        return np.array([len(n) for n in self.neighbor_index], dtype=np.int64)

    def _check_connected(self):
        # Mean aggregation is undefined on isolated nodes, so connectivity is
        # enforced at construction time.
        n = self.num_nodes
        if n <= 1:
            return
        adj = self.adjacency()
        n_comp, _ = sp.csgraph.connected_components(adj, directed=False)
        if n_comp != 1:
            raise ValidationError(f"graph is not connected ({n_comp} components)")

    def adjacency(self):
        """Symmetric sparse adjacency matrix (0/1 entries)."""
        n = self.num_nodes
        i = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        j = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return sp.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))

    def mean_aggregation_matrix(self):
        """Row-normalized adjacency: (M h)_u = mean of h over N(u)."""
        adj = self.adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = sp.diags(1.0 / deg)
        return (inv @ adj).tocsr()

    def directed_edges(self):
        """Both orientations of every edge as (src, dst) arrays."""
        src = np.concatenate([self.edges[:, 0], self.edges[:, 1]])
        dst = np.concatenate([self.edges[:, 1], self.edges[:, 0]])
        return src, dst

    def content_hash(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.coords).tobytes())
        h.update(np.ascontiguousarray(self.edges).tobytes())
        return h.hexdigest()


def compute_pseudo_coords(graph):
    """Relative-position vectors coords[dst] - coords[src] for each directed edge.

    Returns (src, dst, e) with e of shape (2 * n_edges, dim).  Raises
    GeometryError on coincident endpoints.
    """
    src, dst = graph.directed_edges()
    e = graph.coords[dst] - graph.coords[src]
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        k = int(np.argmin(norms))
        raise GeometryError(f"zero-length edge ({src[k]}, {dst[k]})")
    return src, dst, e


def save_mesh(graph, path):
    payload = {
        "num_nodes": int(graph.num_nodes),
        "dim": int(graph.dim),
        "coords": graph.coords.tolist(),
        "edges": graph.edges.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_mesh(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    coords = np.asarray(payload["coords"], dtype=np.float64)
    edges = np.asarray(payload["edges"], dtype=np.int64)
    if coords.shape != (payload["num_nodes"], payload["dim"]):
        raise ValidationError("mesh.json coords shape disagrees with header")
    return MeshGraph(coords=coords, edges=edges)
