"""Explanation-quality and prediction-quality metrics.

Fidelity is the mean counterfactual prediction loss over explanations
(non-positive by construction; its magnitude is also reported for
table-style comparison). Explanation size averages per-instance removed
edges plus perturbed slices; sparsity relates that size to the edge count
of the physical graph. Delta-MAE is the error increase the perturbation
causes against ground truth.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .explainer import CounterfactualResult
from .graph import GraphSpec

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """A metric was requested on an empty or malformed input."""


@dataclass
class ExplanationReport:
    explainer_id: str
    n_explanations: int
    fidelity: float
    fidelity_abs: float
    e_size: float
    sparsity: float
    delta_mae: float
    per_instance: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "explainer_id": self.explainer_id,
            "n_explanations": self.n_explanations,
            "fidelity": self.fidelity,
            "fidelity_abs": self.fidelity_abs,
            "e_size": self.e_size,
            "sparsity": self.sparsity,
            "delta_mae": self.delta_mae,
            "per_instance": self.per_instance,
            "warnings": self.warnings,
        }

    def csv_row(self) -> dict:
        return {
            "explainer": self.explainer_id,
            "n": self.n_explanations,
            "fidelity": self.fidelity,
            "e_size": self.e_size,
            "sparsity": self.sparsity,
            "delta_mae": self.delta_mae,
        }


@dataclass
class PredictionReport:
    mae: float
    mape_percent: float | None
    rmse: float
    horizon: int
    split: str

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "mape_percent": self.mape_percent,
            "rmse": self.rmse,
            "horizon": self.horizon,
            "split": self.split,
        }


def fidelity(results: list[CounterfactualResult]) -> float:
    """Mean counterfactual prediction loss over the explanations."""
    if not results:
        raise MetricError("fidelity needs at least one explanation")
    return float(np.mean([r.loss_pred for r in results]))


def explanation_size(results: list[CounterfactualResult]) -> float:
    if not results:
        raise MetricError("explanation size needs at least one explanation")
    return float(np.mean([r.size for r in results]))


def sparsity(e_size: float, k_edges: int) -> float:
    if k_edges <= 0:
        raise MetricError("sparsity needs a positive structural edge count")
    return (k_edges - e_size) / k_edges


def delta_mae(y: np.ndarray, y_hat: np.ndarray, y_bar: np.ndarray) -> float:
    """MAE(y_bar, y) - MAE(y_hat, y): error added by the perturbation."""
    y, y_hat, y_bar = np.asarray(y), np.asarray(y_hat), np.asarray(y_bar)
    if y.shape != y_hat.shape or y.shape != y_bar.shape:
        raise MetricError(f"shape mismatch: {y.shape}, {y_hat.shape}, {y_bar.shape}")
    return float(np.mean(np.abs(y_bar - y)) - np.mean(np.abs(y_hat - y)))


def explanation_report(results: list[CounterfactualResult], graph: GraphSpec,
                       explainer_id: str | None = None) -> ExplanationReport:
    """Aggregate a batch of explanations from one explainer."""
    if not results:
        raise MetricError("report needs at least one explanation")
    ids = {r.explainer_id for r in results}
    if explainer_id is None:
        if len(ids) > 1:
            raise MetricError(f"mixed explainers in one report: {sorted(ids)}")
        explainer_id = results[0].explainer_id

    fid = fidelity(results)
    e_size = explanation_size(results)
    k_edges = graph.edge_count
    sp = sparsity(e_size, k_edges)
    warnings: list[str] = []
    if e_size > k_edges:
        msg = f"e-Size {e_size:.3f} exceeds structural edge count {k_edges}; sparsity {sp:.3f} leaves [0,1]"
        warnings.append(msg)
        log.warning("%s", msg)
    per_instance = [
        {
            "valid": r.valid,
            "size": r.size,
            "loss_pred": r.loss_pred,
            "delta_mae": r.delta_mae,
            "seed": r.seed,
        }
        for r in results
    ]
    return ExplanationReport(
        explainer_id=explainer_id,
        n_explanations=len(results),
        fidelity=fid,
        fidelity_abs=abs(fid),
        e_size=e_size,
        sparsity=sp,
        delta_mae=float(np.mean([r.delta_mae for r in results])),
        per_instance=per_instance,
        warnings=warnings,
    )


def prediction_metrics(y: np.ndarray, y_hat: np.ndarray, split: str = "test",
                       mape_epsilon: float = 1.0) -> PredictionReport:
    """MAE / MAPE(%) / RMSE. Ground-truth entries with |y| < mape_epsilon are
    excluded from MAPE; if nothing survives, MAPE is reported unavailable."""
    y, y_hat = np.asarray(y, dtype=np.float64), np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise MetricError(f"shape mismatch: {y.shape} vs {y_hat.shape}")
    err = y_hat - y
    mae_v = float(np.mean(np.abs(err)))
    rmse_v = float(np.sqrt(np.mean(err**2)))
    keep = np.abs(y) >= mape_epsilon
    if keep.any():
        mape_v = float(100.0 * np.mean(np.abs(err[keep] / y[keep])))
    else:
        mape_v = None
    horizon = y.shape[-3] if y.ndim >= 3 else (y.shape[0] if y.ndim >= 1 else 1)
    return PredictionReport(mae=mae_v, mape_percent=mape_v, rmse=rmse_v, horizon=int(horizon), split=split)
