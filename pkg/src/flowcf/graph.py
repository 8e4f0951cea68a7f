"""Road-network representation: one weighted adjacency for graph convolution
plus two neighbor indicators for the spatial attention blocks.

``a_gcn`` carries Gaussian-kernel distance weights, ``a_geo`` marks
geographically connected sensor pairs, and ``a_sem`` marks "semantic"
pairs: non-adjacent sensors whose training-split flow series correlate.
At construction the indicators are strictly {0,1}; explanation embedding
may later rescale individual entries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Inconsistent graph description."""


@dataclass
class GraphSpec:
    """A sensor graph and the three adjacency matrices the model consumes."""

    n_nodes: int
    edges: list[tuple[int, int, float]]
    a_gcn: np.ndarray
    a_geo: np.ndarray
    a_sem: np.ndarray
    self_loops: bool = False
    _pairs: list[tuple[int, int]] = field(default=None, repr=False)

    def __post_init__(self):
        self.a_gcn = np.asarray(self.a_gcn, dtype=np.float64)
        self.a_geo = np.asarray(self.a_geo, dtype=np.float64)
        self.a_sem = np.asarray(self.a_sem, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        n = self.n_nodes
        for name, mat in (("a_gcn", self.a_gcn), ("a_geo", self.a_geo), ("a_sem", self.a_sem)):
            if mat.shape != (n, n):
                raise GraphError(f"{name} has shape {mat.shape}, expected {(n, n)}")
            if not np.allclose(mat, mat.T):
                raise GraphError(f"{name} must be symmetric")
        diag = np.diag(self.a_gcn)
        if self.self_loops:
            if not np.all(diag > 0):
                raise GraphError("self_loops=True requires a positive a_gcn diagonal")
        elif np.any(diag != 0):
            raise GraphError("a_gcn diagonal must be zero unless self_loops is set")
        for i, j, _ in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise GraphError(f"edge ({i},{j}) references a node outside 0..{n - 1}")

    def with_matrices(self, a_gcn: np.ndarray, a_geo: np.ndarray, a_sem: np.ndarray) -> "GraphSpec":
        """Copy with replaced matrices, skipping construction-time validation.

        Explanation embedding rescales individual entries (and optional row
        renormalization trades exact symmetry for preserved row mass), so
        the {0,1}/symmetry invariants only bind at construction.
        """
        twin = GraphSpec.__new__(GraphSpec)
        twin.n_nodes = self.n_nodes
        twin.edges = list(self.edges)
        twin.a_gcn = np.asarray(a_gcn, dtype=np.float64)
        twin.a_geo = np.asarray(a_geo, dtype=np.float64)
        twin.a_sem = np.asarray(a_sem, dtype=np.float64)
        twin.self_loops = self.self_loops
        twin._pairs = None
        return twin

    @property
    def edge_count(self) -> int:
        """Number of undirected physical edges (the K of the sparsity metric)."""
        return len(self.edges)

    def structural_pairs(self) -> list[tuple[int, int]]:
        """Upper-triangle (i<j) pairs present in any of the three matrices.

        These are the only positions a spatial mask can act on: removing a
        non-edge is not an actionable perturbation.
        """
        if self._pairs is None:
            union = (self.a_gcn != 0) | (self.a_geo != 0) | (self.a_sem != 0)
            np.fill_diagonal(union, False)
            iu, ju = np.nonzero(np.triu(union, k=1))
            self._pairs = list(zip(iu.tolist(), ju.tolist()))
        return self._pairs

    def degrees(self) -> np.ndarray:
        """Row sums of a_gcn, with isolated sensors clamped to 1 so the
        inverse-sqrt degree scaling stays finite."""
        deg = self.a_gcn.sum(axis=1)
        deg[deg == 0] = 1.0
        return deg


def gaussian_edge_weights(edges: list[tuple[int, int, float]], cutoff: float = 0.1) -> dict[tuple[int, int], float]:
    """Distance-to-weight kernel w = exp(-d^2 / sigma^2), sigma = std of
    distances; weights below ``cutoff`` are zeroed. With a single distinct
    distance (sigma 0) all edges get weight 1."""
    costs = np.array([c for _, _, c in edges], dtype=np.float64)
    sigma = costs.std()
    weights = {}
    for (i, j, c) in edges:
        w = 1.0 if sigma == 0 else float(np.exp(-(c * c) / (sigma * sigma)))
        weights[(i, j)] = w if w >= cutoff else 0.0
    return weights


def adjacency_from_edges(n_nodes: int, edges: list[tuple[int, int, float]], self_loops: bool = False) -> np.ndarray:
    """Symmetric weighted adjacency from undirected (i, j, distance) edges."""
    a = np.zeros((n_nodes, n_nodes))
    weights = gaussian_edge_weights(edges)
    for (i, j, _c) in edges:
        if i == j:
            raise GraphError(f"self edge ({i},{i}) not allowed in the edge list")
        w = weights[(i, j)]
        a[i, j] = w
        a[j, i] = w
    if self_loops:
        a = a + np.eye(n_nodes)
    return a


def geographic_indicator(a_gcn: np.ndarray) -> np.ndarray:
    """Binarized connectivity: 1 where a distance-kernel weight survived."""
    geo = (a_gcn != 0).astype(np.float64)
    np.fill_diagonal(geo, 0.0)
    return geo


def semantic_indicator(train_series: np.ndarray, a_geo: np.ndarray, k: int = 3) -> np.ndarray:
    """Semantic neighbor indicator from flow-pattern similarity.

    For each node, the k non-geographic partners with the highest Pearson
    correlation of their training-split flow series become semantic
    neighbors; the indicator is symmetrized. Constant series correlate
    with nothing.
    """
    n = a_geo.shape[0]
    x = np.asarray(train_series, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != n:
        raise GraphError(f"train series shape {x.shape} does not match {n} nodes")
    centered = x - x.mean(axis=0)
    std = centered.std(axis=0)
    safe = np.where(std == 0, 1.0, std)
    z = centered / safe
    corr = (z.T @ z) / x.shape[0]
    corr[std == 0, :] = 0.0
    corr[:, std == 0] = 0.0
    np.fill_diagonal(corr, -np.inf)
    corr[a_geo != 0] = -np.inf

    sem = np.zeros((n, n))
    for i in range(n):
        order = np.argsort(-corr[i])
        picked = 0
        for j in order:
            if picked >= k or not np.isfinite(corr[i, j]) or corr[i, j] <= 0:
                break
            sem[i, j] = 1.0
            sem[j, i] = 1.0
            picked += 1
    return sem


def build_graph(
    n_nodes: int,
    edges: list[tuple[int, int, float]],
    train_series: np.ndarray | None = None,
    k_semantic: int = 3,
    self_loops: bool = False,
) -> GraphSpec:
    """Assemble a GraphSpec from an edge list and (optionally) training flow."""
    a_gcn = adjacency_from_edges(n_nodes, edges, self_loops=self_loops)
    a_geo = geographic_indicator(a_gcn - (np.eye(n_nodes) if self_loops else 0))
    if train_series is None:
        a_sem = np.zeros((n_nodes, n_nodes))
    else:
        a_sem = semantic_indicator(train_series, a_geo, k=k_semantic)
    return GraphSpec(n_nodes=n_nodes, edges=list(edges), a_gcn=a_gcn, a_geo=a_geo, a_sem=a_sem, self_loops=self_loops)
