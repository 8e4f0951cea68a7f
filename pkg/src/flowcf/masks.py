"""Learnable perturbation masks and their binary projections.

The spatial mask parameterizes the upper triangle of an N x N symmetric
matrix (diagonal fixed at 1); the temporal mask holds one value per input
time slice. Parameters are stored as pre-sigmoid logits so the continuous
materialization always lies in (0, 1). Thresholding keeps an entry when
sigmoid(logit) >= tau, which makes the customary 0.5 initialization a
no-op perturbation at step zero.

Only positions that are structurally present in at least one adjacency
matrix can actually change the model, so distance terms and explanation
sizes are restricted to those positions; the remaining logits exist but
never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, sigmoid
from .graph import GraphSpec


def upper_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def logit(p: float) -> float:
    if not 0 < p < 1:
        raise ValueError(f"init value must be in (0,1), got {p}")
    return float(np.log(p / (1 - p)))


@dataclass
class SpatialMask:
    """Continuous symmetric mask over node pairs, learnable on the logits."""

    n: int
    logits: Tensor  # (n*(n-1)/2,)
    structural_idx: np.ndarray  # indices into the pair list that can act

    @classmethod
    def create(cls, graph: GraphSpec, init: float = 0.5, seed: int | None = None, jitter: float = 0.0) -> "SpatialMask":
        n = graph.n_nodes
        pairs = upper_pairs(n)
        base = np.full(len(pairs), logit(init))
        if jitter > 0:
            base = base + np.random.default_rng(seed).normal(0.0, jitter, size=len(pairs))
        index = {p: k for k, p in enumerate(pairs)}
        structural = np.array(sorted(index[p] for p in graph.structural_pairs()), dtype=np.int64)
        return cls(n=n, logits=Tensor(base, requires_grad=True), structural_idx=structural)

    def pairs(self) -> list[tuple[int, int]]:
        return upper_pairs(self.n)

    def structural_pairs(self) -> list[tuple[int, int]]:
        pairs = self.pairs()
        return [pairs[k] for k in self.structural_idx.tolist()]

    def materialize(self) -> Tensor:
        """Symmetric (N, N) tensor: sigmoid(logit) off-diagonal, 1 on the
        diagonal. Gradients land on the upper-triangle logits only."""
        s = sigmoid(self.logits)
        n = self.n
        iu, ju = np.triu_indices(n, k=1)

        out = np.ones((n, n))
        out[iu, ju] = s.data
        out[ju, iu] = s.data

        def vjp(g):
            return (g[iu, ju] + g[ju, iu],)

        return Tensor.from_op(out, (s,), vjp)

    def structural_values(self) -> Tensor:
        """Continuous mask values on structural pairs (for the distance term)."""
        s = sigmoid(self.logits)
        idx = self.structural_idx

        def vjp(g):
            full = np.zeros_like(s.data)
            full[idx] = g
            return (full,)

        return Tensor.from_op(s.data[idx], (s,), vjp)


@dataclass
class TemporalMask:
    """One continuous mask value per input time slice (logical shape 1 x T)."""

    t: int
    logits: Tensor  # (T,)

    @classmethod
    def create(cls, t: int, init: float = 0.5, seed: int | None = None, jitter: float = 0.0) -> "TemporalMask":
        base = np.full(t, logit(init))
        if jitter > 0:
            base = base + np.random.default_rng(seed).normal(0.0, jitter, size=t)
        return cls(t=t, logits=Tensor(base, requires_grad=True))

    def materialize(self) -> Tensor:
        """(T, 1, 1) tensor that broadcasts over all nodes and channels."""
        s = sigmoid(self.logits)
        return s.reshape((self.t, 1, 1))

    def values(self) -> Tensor:
        return sigmoid(self.logits)


@dataclass
class BinaryMask:
    """Thresholded projection of a continuous mask."""

    values: np.ndarray  # (N, N) for spatial, (T,) for temporal
    source: str  # "spatial" | "temporal"
    threshold: float
    removed: list  # [(i, j)] edge pairs or [t] slice indices

    def as_tensor(self) -> Tensor:
        if self.source == "spatial":
            return Tensor(self.values)
        return Tensor(self.values.reshape((-1, 1, 1)))

    def distance(self) -> float:
        """Perturbation size as the elementwise |A - A_bar| sum on unit
        entries: 2 per removed undirected edge, 1 per removed slice."""
        if self.source == "spatial":
            return 2.0 * len(self.removed)
        return float(len(self.removed))


def threshold_spatial(mask: SpatialMask, tau: float = 0.5) -> BinaryMask:
    """Binary projection; only structural pairs can be removed."""
    probs = 1.0 / (1.0 + np.exp(-mask.logits.data))
    values = np.ones((mask.n, mask.n))
    removed = []
    pairs = mask.pairs()
    for k in mask.structural_idx.tolist():
        if probs[k] < tau:
            i, j = pairs[k]
            values[i, j] = 0.0
            values[j, i] = 0.0
            removed.append((i, j))
    return BinaryMask(values=values, source="spatial", threshold=tau, removed=removed)


def threshold_temporal(mask: TemporalMask, tau: float = 0.5) -> BinaryMask:
    probs = 1.0 / (1.0 + np.exp(-mask.logits.data))
    values = (probs >= tau).astype(np.float64)
    removed = [int(t) for t in np.nonzero(values == 0)[0]]
    return BinaryMask(values=values, source="temporal", threshold=tau, removed=removed)


def binary_to_logits(binary: BinaryMask, magnitude: float = 20.0) -> np.ndarray:
    """Re-embed binary values as saturated logits (threshold idempotence)."""
    if binary.source == "spatial":
        iu, ju = np.triu_indices(binary.values.shape[0], k=1)
        vals = binary.values[iu, ju]
    else:
        vals = binary.values
    return np.where(vals >= 0.5, magnitude, -magnitude)


def apply(mask_s: BinaryMask | None, mask_f: BinaryMask | None, graph: GraphSpec,
          x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Materialize the perturbed inputs (A_gcn, A_geo, A_sem, X) as plain
    arrays. The one spatial mask multiplies all three adjacencies."""
    if mask_s is not None:
        m = mask_s.values
        a_gcn, a_geo, a_sem = m * graph.a_gcn, m * graph.a_geo, m * graph.a_sem
    else:
        a_gcn, a_geo, a_sem = graph.a_gcn.copy(), graph.a_geo.copy(), graph.a_sem.copy()
    if mask_f is not None:
        x_bar = mask_f.values.reshape((-1, 1, 1)) * x
    else:
        x_bar = x.copy()
    return a_gcn, a_geo, a_sem, x_bar


def explanation_dict(graph: GraphSpec, mask_s: BinaryMask | None, mask_f: BinaryMask | None,
                     seed: int | None = None) -> dict:
    """JSON-ready explanation: removed edges with their prior weight,
    perturbed slice indices, and the thresholds used."""
    removed_edges = []
    if mask_s is not None:
        for i, j in mask_s.removed:
            removed_edges.append([int(i), int(j), float(graph.a_gcn[i, j])])
    removed_slices = [int(t) for t in mask_f.removed] if mask_f is not None else []
    return {
        "removed_edges": removed_edges,
        "removed_slices": removed_slices,
        "threshold_spatial": mask_s.threshold if mask_s is not None else None,
        "threshold_temporal": mask_f.threshold if mask_f is not None else None,
        "seed": seed,
    }
