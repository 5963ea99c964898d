"""Voxel-lattice and sensor nearest-neighbour graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..errors import InvalidConfigError, InvalidInputError

GRAPH_KINDS = ("voxel_knn6", "sensor_knn5")


@dataclass(frozen=True, eq=False)
class GraphSpec:
    """Symmetric adjacency; ``src``/``dst`` list each undirected edge in both directions, no self-loops."""

    kind: str
    n_nodes: int
    src: np.ndarray
    dst: np.ndarray

    def neighbours(self, node):
        return np.sort(self.src[self.dst == node])

    def degrees(self):
        return np.bincount(self.dst, minlength=self.n_nodes)

    def with_self_loops(self):
        loops = np.arange(self.n_nodes)
        return np.concatenate([self.src, loops]), np.concatenate([self.dst, loops])


def _symmetric(n, pairs):
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    both = np.vstack([pairs, pairs[:, ::-1]])
    both = both[both[:, 0] != both[:, 1]]
    both = np.unique(both, axis=0)
    return both[:, 0], both[:, 1]


def build_graph(kind: str, geometry) -> GraphSpec:
    """``voxel_knn6``: ``geometry`` is (nodes, 3) integer lattice indices; edges join face neighbours.
    ``sensor_knn5``: ``geometry`` is (nodes, 3) positions; directed 5-NN, then symmetrised.
    """
    g = np.asarray(geometry)
    if g.ndim != 2 or g.shape[1] != 3:
        raise InvalidInputError("geometry must be (nodes, 3)")
    n = len(g)
    if n < 6:
        raise InvalidInputError(f"graphs need at least 6 nodes, got {n}")
    if kind == "voxel_knn6":
        lookup = {tuple(c): i for i, c in enumerate(g.astype(np.int64).tolist())}
        pairs = []
        for i, c in enumerate(g.astype(np.int64).tolist()):
            for ax in range(3):
                nb = list(c)
                nb[ax] += 1
                j = lookup.get(tuple(nb))
                if j is not None:
                    pairs.append((i, j))
        src, dst = _symmetric(n, pairs)
    elif kind == "sensor_knn5":
        _, idx = cKDTree(g).query(g, k=6)
        pairs = [(i, j) for i in range(n) for j in idx[i, 1:]]
        src, dst = _symmetric(n, pairs)
    else:
        raise InvalidConfigError(f"unknown graph kind {kind!r}; valid: {GRAPH_KINDS}")
    return GraphSpec(kind, n, src, dst)
