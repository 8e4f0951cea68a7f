"""Comparison explainers: RANDOM one-shot masks, exhaustive/greedy one-hop
subset search, and attention-score edge ranking.

All three emit the same CounterfactualResult schema as the mask search.
Unlike the searched explainer (which falls back to the identity when it
finds nothing), a one-shot baseline reports the candidate it actually
evaluated, flagged invalid when the prediction change stayed below the
bar.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .data import FlowWindow, NormStats
from .explainer import (
    CounterfactualResult,
    ExplainerConfig,
    evaluate_candidate,
    frozen,
    mae,
    resolve_tau_v,
    _reporting_units,
)
from .graph import GraphSpec
from .masks import BinaryMask, upper_pairs
from .model import GraphTransformer, predict, stack_windows

log = logging.getLogger(__name__)

EXHAUSTIVE_DEGREE_LIMIT = 12


@dataclass
class BaselineKind:
    """Which baseline to run, with its per-kind parameter."""

    name: str  # "random" | "one_hop" | "attention_score"
    seed: int | None = None
    center: int | None = None
    top_k: int | None = None

    def validate(self) -> None:
        if self.name not in ("random", "one_hop", "attention_score"):
            raise ValueError(f"unknown baseline {self.name!r}")
        if self.name == "random" and self.seed is None:
            raise ValueError("random baseline needs a seed")
        if self.name == "attention_score" and (self.top_k is None or self.top_k < 0):
            raise ValueError("attention baseline needs top_k >= 0")


def random_spatial_logits(n_nodes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform [-1, 1] logits over the full upper triangle; after the shared
    sigmoid + 0.5 threshold each entry is removed with probability 1/2."""
    return rng.uniform(-1.0, 1.0, size=n_nodes * (n_nodes - 1) // 2)


def binary_from_removed(graph: GraphSpec, removed: list[tuple[int, int]], threshold: float = 0.5) -> BinaryMask:
    values = np.ones((graph.n_nodes, graph.n_nodes))
    norm = [(min(i, j), max(i, j)) for i, j in removed]
    for i, j in norm:
        values[i, j] = 0.0
        values[j, i] = 0.0
    return BinaryMask(values=values, source="spatial", threshold=threshold, removed=sorted(set(norm)))


def _one_shot_result(explainer_id: str, graph: GraphSpec, binary: BinaryMask, ev, y_hat_r, y_true_r,
                     seed=None, extras=None) -> CounterfactualResult:
    delta_a = [(i, j, float(graph.a_gcn[i, j])) for i, j in binary.removed]
    mae_orig = mae(y_hat_r, y_true_r)
    y_bar_r = ev.y_bar_r
    return CounterfactualResult(
        explainer_id=explainer_id, dimension="spatial", valid=ev.valid,
        best_distance=ev.distance, delta_a=delta_a, delta_x=[], size=len(delta_a),
        loss_pred=ev.loss_pred, mae_original=mae_orig,
        mae_counterfactual=mae(y_bar_r, y_true_r), delta_mae=mae(y_bar_r, y_true_r) - mae_orig,
        seed=seed, extras=extras or {},
    )


class _Grader:
    """Shared setup: original prediction, validity bar, reporting units."""

    def __init__(self, model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                 config: ExplainerConfig, stats: NormStats | None):
        self.model = model
        self.graph = graph
        self.stats = stats
        self.xs, ys = stack_windows(windows)
        self.y_hat = model.forward(graph, self.xs).data
        self.y_hat_r = _reporting_units(self.y_hat, stats)
        self.y_true_r = _reporting_units(ys, stats)
        self.tau_v = resolve_tau_v(config, self.y_hat_r, self.y_true_r)
        self.mask_targets = config.mask_targets

    def grade(self, binary: BinaryMask):
        return evaluate_candidate(self.model, self.graph, self.xs, self.y_hat, self.tau_v,
                                  binary_s=binary, mask_targets=self.mask_targets, stats=self.stats)


def random_explain(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                   seed: int, config: ExplainerConfig | None = None,
                   stats: NormStats | None = None) -> CounterfactualResult:
    """One random mask, no optimization, same thresholding pipeline."""
    config = config or ExplainerConfig()
    rng = np.random.default_rng(seed)
    logits = random_spatial_logits(graph.n_nodes, rng)
    probs = 1.0 / (1.0 + np.exp(-logits))
    pairs = upper_pairs(graph.n_nodes)
    structural = set(graph.structural_pairs())
    removed = [pairs[k] for k in range(len(pairs))
               if pairs[k] in structural and probs[k] < config.threshold]
    binary = binary_from_removed(graph, removed, config.threshold)
    with frozen(model):
        grader = _Grader(model, graph, windows, config, stats)
        ev = grader.grade(binary)
        return _one_shot_result("random", graph, binary, ev, grader.y_hat_r, grader.y_true_r, seed=seed)


def _one_hop_for_center(grader: _Grader, graph: GraphSpec, center: int,
                        config: ExplainerConfig) -> CounterfactualResult | None:
    incident = [p for p in graph.structural_pairs() if center in p]
    if not incident:
        return None
    if len(incident) <= EXHAUSTIVE_DEGREE_LIMIT:
        # smallest valid subset, exhaustively; ties broken by prediction change
        for size in range(1, len(incident) + 1):
            best = None
            for subset in combinations(incident, size):
                binary = binary_from_removed(graph, list(subset), config.threshold)
                ev = grader.grade(binary)
                if ev.valid and (best is None or ev.change > best[1].change):
                    best = (binary, ev)
            if best is not None:
                return _one_shot_result("one_hop", graph, best[0], best[1],
                                        grader.y_hat_r, grader.y_true_r, extras={"center": center})
    else:
        # greedy: add edges by marginal prediction change until valid
        singles = []
        for pair in incident:
            ev = grader.grade(binary_from_removed(graph, [pair], config.threshold))
            singles.append((ev.change, pair))
        singles.sort(key=lambda s: (-s[0], s[1]))
        chosen: list[tuple[int, int]] = []
        for _, pair in singles:
            chosen.append(pair)
            binary = binary_from_removed(graph, chosen, config.threshold)
            ev = grader.grade(binary)
            if ev.valid:
                return _one_shot_result("one_hop", graph, binary, ev,
                                        grader.y_hat_r, grader.y_true_r, extras={"center": center})
    # nothing valid in this neighborhood: report the full-neighborhood shot
    binary = binary_from_removed(graph, incident, config.threshold)
    ev = grader.grade(binary)
    return _one_shot_result("one_hop", graph, binary, ev, grader.y_hat_r, grader.y_true_r,
                            extras={"center": center})


def one_hop_explain(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                    center: int | None = None, config: ExplainerConfig | None = None,
                    stats: NormStats | None = None) -> CounterfactualResult:
    """Counterfactual search restricted to edges incident to one node.

    Pure forward evaluation: never calls backward. With ``center=None``
    every node is tried and the best (smallest valid, then largest change)
    result is returned.
    """
    config = config or ExplainerConfig()
    with frozen(model):
        grader = _Grader(model, graph, windows, config, stats)
        if center is not None:
            result = _one_hop_for_center(grader, graph, center, config)
            if result is None:
                return CounterfactualResult(
                    explainer_id="one_hop", dimension="spatial", valid=False, best_distance=None,
                    delta_a=[], delta_x=[], size=0, loss_pred=0.0,
                    mae_original=mae(grader.y_hat_r, grader.y_true_r),
                    mae_counterfactual=mae(grader.y_hat_r, grader.y_true_r), delta_mae=0.0,
                    extras={"center": center, "note": "degree-0 center"},
                )
            return result
        results = []
        for node in range(graph.n_nodes):
            res = _one_hop_for_center(grader, graph, node, config)
            if res is not None:
                results.append(res)
        valid = [r for r in results if r.valid]
        pool = valid or results
        pool.sort(key=lambda r: (r.size if r.valid else np.inf, -r.delta_mae))
        return pool[0]


def attention_edge_scores(model: GraphTransformer, graph: GraphSpec,
                          windows: list[FlowWindow]) -> list[tuple[int, int, float]]:
    """Mean post-softmax attention per structural edge, averaged across all
    spatial attention blocks, heads, time steps, windows, and both
    directions; each matrix only contributes where it allows the pair."""
    collected: dict[str, list] = {}
    predict(model, graph, windows, collect_attention=collected)
    sums: dict[tuple[int, int], float] = {}
    counts: dict[tuple[int, int], int] = {}
    pairs = graph.structural_pairs()
    for key, arrays in collected.items():
        if ".temporal" in key:
            continue
        allow = graph.a_geo if ".geo" in key else graph.a_sem
        for att in arrays:
            flat = att.reshape(-1, att.shape[-2], att.shape[-1])
            for i, j in pairs:
                if allow[i, j] == 0:
                    continue
                contribution = float(flat[:, i, j].sum() + flat[:, j, i].sum())
                sums[(i, j)] = sums.get((i, j), 0.0) + contribution
                counts[(i, j)] = counts.get((i, j), 0) + 2 * flat.shape[0]
    scores = []
    for i, j in pairs:
        if (i, j) in sums:
            scores.append((i, j, sums[(i, j)] / counts[(i, j)]))
        else:
            scores.append((i, j, 0.0))
    # highest score first; lexicographic (i, j) on ties
    scores.sort(key=lambda s: (-s[2], s[0], s[1]))
    return scores


def attention_explain(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                      top_k: int, config: ExplainerConfig | None = None,
                      stats: NormStats | None = None) -> CounterfactualResult:
    """Remove the top_k highest-attention edges and grade the result.

    The raw ranking is also emitted (``extras["ranking"]``) for readings of
    attention explanation that present rather than remove edges.
    """
    config = config or ExplainerConfig()
    with frozen(model):
        scores = attention_edge_scores(model, graph, windows)
        if top_k > len(scores):
            log.warning("top_k=%d exceeds %d structural edges; clamping", top_k, len(scores))
            top_k = len(scores)
        removed = [(i, j) for i, j, _ in scores[:top_k]]
        binary = binary_from_removed(graph, removed, config.threshold)
        grader = _Grader(model, graph, windows, config, stats)
        ev = grader.grade(binary)
        extras = {"top_k": top_k, "ranking": [[i, j, s] for i, j, s in scores]}
        return _one_shot_result("attention_score", graph, binary, ev,
                                grader.y_hat_r, grader.y_true_r, extras=extras)


def run_baseline(kind: BaselineKind, model: GraphTransformer, graph: GraphSpec,
                 windows: list[FlowWindow], config: ExplainerConfig | None = None,
                 stats: NormStats | None = None,
                 reference: CounterfactualResult | None = None) -> CounterfactualResult:
    """Dispatch a baseline run; the attention baseline defaults its top_k to
    the reference explanation's rounded size for like-for-like comparison."""
    kind = BaselineKind(kind.name, kind.seed, kind.center, kind.top_k)
    if kind.name == "attention_score" and kind.top_k is None and reference is not None:
        kind.top_k = max(1, int(round(reference.size)))
    kind.validate()
    if kind.name == "random":
        return random_explain(model, graph, windows, kind.seed, config=config, stats=stats)
    if kind.name == "one_hop":
        return one_hop_explain(model, graph, windows, center=kind.center, config=config, stats=stats)
    return attention_explain(model, graph, windows, kind.top_k, config=config, stats=stats)
