"""Gradient search for minimal perturbation masks.

The search descends the combined loss

    L = -MSE(Phi(A, X), Phi(A_bar, X_bar)) + beta * L_dist

on the continuous mask logits of a frozen model: the negated prediction
term rewards perturbations that move the counterfactual branch away from
the observed branch, and the distance term charges for every
removed-or-damped structural edge and time slice. Each iteration also
thresholds the mask to a binary candidate, checks whether the prediction
change clears the validity bar, and keeps the valid candidate with the
smallest perturbation size seen so far. Spatial and temporal masks are
searched separately because their perturbation ranges differ too much to
share one trade-off.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import Tensor, mse, negate, tensor_sum
from .data import FlowWindow, NormStats, denormalize
from .graph import GraphSpec
from .masks import BinaryMask, SpatialMask, TemporalMask, threshold_spatial, threshold_temporal
from .model import ALL_MASK_TARGETS, GraphTransformer, stack_windows

log = logging.getLogger(__name__)


class FrozenModelViolation(RuntimeError):
    """Model parameters changed during an explainer run."""


@dataclass
class ExplainerConfig:
    dimension: str = "spatial"
    beta: float = 0.5
    alpha: float = 0.1
    iterations: int = 300
    threshold: float = 0.5
    validity_epsilon: float | None = None  # absolute MAE bar; None = relative
    validity_relative: float = 0.05
    seed: int = 0
    mask_init: float = 0.5
    jitter: float = 0.0
    mask_targets: tuple[str, ...] = ALL_MASK_TARGETS

    def validate(self) -> None:
        if self.dimension not in ("spatial", "temporal"):
            raise ValueError(f"dimension must be spatial or temporal, got {self.dimension!r}")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0,1)")
        if not set(self.mask_targets) <= set(ALL_MASK_TARGETS):
            raise ValueError(f"mask_targets must be a subset of {ALL_MASK_TARGETS}")


@dataclass
class TraceRow:
    iteration: int
    loss_pred: float
    loss_dist: float
    distance: float
    valid: bool


@dataclass
class CounterfactualResult:
    """One explanation, in the schema every explainer (searched or
    baseline) emits, so the metrics layer stays explainer-agnostic."""

    explainer_id: str
    dimension: str
    valid: bool
    best_distance: float | None
    delta_a: list[tuple[int, int, float]]
    delta_x: list[int]
    size: int
    loss_pred: float
    mae_original: float
    mae_counterfactual: float
    delta_mae: float
    seed: int | None = None
    trace: list[TraceRow] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "explainer_id": self.explainer_id,
            "dimension": self.dimension,
            "valid": self.valid,
            "best_distance": self.best_distance,
            "delta_a": [[int(i), int(j), float(w)] for i, j, w in self.delta_a],
            "delta_x": [int(t) for t in self.delta_x],
            "size": self.size,
            "loss_pred": self.loss_pred,
            "mae_original": self.mae_original,
            "mae_counterfactual": self.mae_counterfactual,
            "delta_mae": self.delta_mae,
            "seed": self.seed,
            "extras": self.extras,
        }

    def trace_rows(self) -> list[dict]:
        return [asdict(row) for row in self.trace]


@contextmanager
def frozen(model: GraphTransformer):
    """Freeze model parameters for the duration of a search and verify
    afterwards that not a single byte moved."""
    before = model.param_bytes()
    flags = {k: p.requires_grad for k, p in model.params.items()}
    model.set_requires_grad(False)
    try:
        yield
    finally:
        for k, p in model.params.items():
            p.requires_grad = flags[k]
        if model.param_bytes() != before:
            raise FrozenModelViolation("model parameters were modified during the search")


def mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


def is_valid_counterfactual(y_hat: np.ndarray, y_bar: np.ndarray, tau_v: float) -> bool:
    """Valid when the perturbed prediction moved at least tau_v in MAE."""
    if tau_v <= 0:
        raise ValueError("tau_v must be positive")
    return mae(y_hat, y_bar) >= tau_v


def loss_pred(model: GraphTransformer, graph: GraphSpec, xs: np.ndarray, y_hat: np.ndarray,
              mask_s: Tensor | None = None, mask_f: Tensor | None = None,
              mask_targets: tuple[str, ...] = ALL_MASK_TARGETS) -> Tensor:
    """-MSE between the observed-branch prediction and the perturbed one.

    ``y_hat`` is the frozen model's unperturbed output and enters as a
    constant; gradients flow only into the masks.
    """
    y_bar = model.forward(graph, xs, mask_s=mask_s, mask_f=mask_f, mask_targets=mask_targets)
    return negate(mse(Tensor(y_hat), y_bar))


def loss_dist(mask_s: SpatialMask | None = None, mask_f: TemporalMask | None = None) -> Tensor:
    """Continuous perturbation size: sum of (1 - mask) over structural edge
    slots plus time slots, so gradients exist everywhere."""
    total = Tensor(0.0)
    if mask_s is not None:
        vals = mask_s.structural_values()
        total = total + tensor_sum(1.0 - vals)
    if mask_f is not None:
        total = total + tensor_sum(1.0 - mask_f.values())
    return total


@dataclass
class CandidateEvaluation:
    y_bar: np.ndarray
    y_bar_r: np.ndarray  # reporting units
    change: float  # MAE(y_bar, y_hat), reporting units
    valid: bool
    distance: float
    loss_pred: float  # -MSE(y_hat, y_bar), reporting units


def evaluate_candidate(model: GraphTransformer, graph: GraphSpec, xs: np.ndarray, y_hat: np.ndarray,
                       tau_v: float, binary_s: BinaryMask | None = None, binary_f: BinaryMask | None = None,
                       mask_targets: tuple[str, ...] = ALL_MASK_TARGETS,
                       stats: NormStats | None = None) -> CandidateEvaluation:
    """Run the frozen model under a binary candidate mask and grade it."""
    mask_s = binary_s.as_tensor() if binary_s is not None else None
    mask_f = binary_f.as_tensor() if binary_f is not None else None
    y_bar = model.forward(graph, xs, mask_s=mask_s, mask_f=mask_f, mask_targets=mask_targets).data
    y_bar_r, y_hat_r = _reporting_units(y_bar, stats), _reporting_units(y_hat, stats)
    change = mae(y_bar_r, y_hat_r)
    distance = sum(b.distance() for b in (binary_s, binary_f) if b is not None)
    return CandidateEvaluation(
        y_bar=y_bar,
        y_bar_r=y_bar_r,
        change=change,
        valid=change >= tau_v,
        distance=distance,
        loss_pred=-float(np.mean((y_bar_r - y_hat_r) ** 2)),
    )


def _reporting_units(y: np.ndarray, stats: NormStats | None) -> np.ndarray:
    return denormalize(y, stats) if stats is not None else y


def resolve_tau_v(config: ExplainerConfig, y_hat_r: np.ndarray, y_true_r: np.ndarray) -> float:
    """Absolute validity bar, defaulting to a fraction of the original
    prediction error so the criterion scales across datasets."""
    if config.validity_epsilon is not None:
        return config.validity_epsilon
    return config.validity_relative * mae(y_hat_r, y_true_r)


def _finish(explainer_id: str, config: ExplainerConfig, graph: GraphSpec, best: dict | None,
            y_hat_r: np.ndarray, y_true_r: np.ndarray, trace: list[TraceRow]) -> CounterfactualResult:
    mae_orig = mae(y_hat_r, y_true_r)
    if best is None:
        return CounterfactualResult(
            explainer_id=explainer_id, dimension=config.dimension, valid=False,
            best_distance=None, delta_a=[], delta_x=[], size=0, loss_pred=0.0,
            mae_original=mae_orig, mae_counterfactual=mae_orig, delta_mae=0.0,
            seed=config.seed, trace=trace,
        )
    binary_s: BinaryMask | None = best.get("binary_s")
    binary_f: BinaryMask | None = best.get("binary_f")
    delta_a = [(i, j, float(graph.a_gcn[i, j])) for i, j in (binary_s.removed if binary_s else [])]
    delta_x = list(binary_f.removed) if binary_f else []
    mae_cf = mae(best["y_bar_r"], y_true_r)
    return CounterfactualResult(
        explainer_id=explainer_id, dimension=config.dimension, valid=True,
        best_distance=best["distance"], delta_a=delta_a, delta_x=delta_x,
        size=len(delta_a) + len(delta_x), loss_pred=best["loss_pred"],
        mae_original=mae_orig, mae_counterfactual=mae_cf, delta_mae=mae_cf - mae_orig,
        seed=config.seed, trace=trace,
    )


def search(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
           config: ExplainerConfig, stats: NormStats | None = None) -> CounterfactualResult:
    """Run the mask search in the configured dimension (Algorithm: per
    iteration threshold, evaluate, track best valid candidate, then one
    plain gradient-descent step on the continuous logits)."""
    config.validate()
    spatial = config.dimension == "spatial"
    xs, ys = stack_windows(windows)
    t_win = xs.shape[1]

    with frozen(model):
        y_hat = model.forward(graph, xs).data
        y_hat_r = _reporting_units(y_hat, stats)
        y_true_r = _reporting_units(ys, stats)
        tau_v = resolve_tau_v(config, y_hat_r, y_true_r)

        if spatial:
            mask = SpatialMask.create(graph, init=config.mask_init, seed=config.seed, jitter=config.jitter)
        else:
            mask = TemporalMask.create(t_win, init=config.mask_init, seed=config.seed, jitter=config.jitter)

        best: dict | None = None
        trace: list[TraceRow] = []
        for it in range(config.iterations):
            binary = threshold_spatial(mask, config.threshold) if spatial else threshold_temporal(mask, config.threshold)
            ev = evaluate_candidate(
                model, graph, xs, y_hat, tau_v,
                binary_s=binary if spatial else None,
                binary_f=None if spatial else binary,
                mask_targets=config.mask_targets, stats=stats,
            )
            if ev.valid and (best is None or ev.distance <= best["distance"]):
                best = {
                    "binary_s": binary if spatial else None,
                    "binary_f": None if spatial else binary,
                    "distance": ev.distance,
                    "loss_pred": ev.loss_pred,
                    "y_bar_r": _reporting_units(ev.y_bar, stats),
                }

            continuous = mask.materialize()
            l_pred = loss_pred(
                model, graph, xs, y_hat,
                mask_s=continuous if spatial else None,
                mask_f=None if spatial else continuous,
                mask_targets=config.mask_targets,
            )
            l_dist = loss_dist(mask_s=mask if spatial else None, mask_f=None if spatial else mask)
            total = l_pred + config.beta * l_dist
            mask.logits.zero_grad()
            total.backward()
            mask.logits.data -= config.alpha * mask.logits.grad
            trace.append(TraceRow(
                iteration=it, loss_pred=l_pred.item(), loss_dist=l_dist.item(),
                distance=ev.distance, valid=ev.valid,
            ))
        result = _finish("mask_search", config, graph, best, y_hat_r, y_true_r, trace)
    log.info("%s search: valid=%s distance=%s size=%d", config.dimension, result.valid,
             result.best_distance, result.size)
    return result


def search_spatial(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                   config: ExplainerConfig, stats: NormStats | None = None) -> CounterfactualResult:
    cfg = ExplainerConfig(**{**asdict(config), "dimension": "spatial"})
    cfg.mask_targets = tuple(config.mask_targets)
    return search(model, graph, windows, cfg, stats=stats)


def search_temporal(model: GraphTransformer, graph: GraphSpec, windows: list[FlowWindow],
                    config: ExplainerConfig, stats: NormStats | None = None) -> CounterfactualResult:
    cfg = ExplainerConfig(**{**asdict(config), "dimension": "temporal"})
    cfg.mask_targets = tuple(config.mask_targets)
    return search(model, graph, windows, cfg, stats=stats)
