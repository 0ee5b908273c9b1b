"""Forecast metrics: RMSE, R^2 and leave-one-node-out spRMSE."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import NormalizationStats, WindowSet, denormalize
from .errors import UndefinedMetricError


def _masked(pred, truth, mask):
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    mask = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return pred[mask], truth[mask]


def rmse(pred, truth, mask=None) -> float:
    p, t = _masked(pred, truth, mask)
    if p.size == 0:
        raise UndefinedMetricError("RMSE over an empty mask")
    return float(np.sqrt(np.mean(np.square(p - t))))


def r_squared(pred, truth, mask=None) -> float:
    """``1 - SS_res / SS_tot`` with SS_tot taken around the mean of valid truth."""
    p, t = _masked(pred, truth, mask)
    if t.size < 2:
        raise UndefinedMetricError("R^2 needs at least two valid points")
    ss_tot = float(np.sum(np.square(t - t.mean())))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 is undefined when the truth has zero variance")
    return 1.0 - float(np.sum(np.square(t - p))) / ss_tot


def persistence_forecast(windows: WindowSet) -> np.ndarray:
    """Repeat the last observed target value over the horizon: (B, T', N)."""
    last = windows.inputs[:, -1, :, windows.target_index]
    return np.repeat(last[:, None, :], windows.targets.shape[1], axis=1)


@dataclass
class SpRMSE:
    value: float
    per_node: list[float | None]
    excluded_nodes: list[int] = field(default_factory=list)
    fill_value: float = 0.0
    blanked_channels: list[int] = field(default_factory=list)


def _predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    return model.predict if hasattr(model, "predict") else model


def sp_rmse_detail(model, windows: WindowSet, target_channels: int | Sequence[int],
                   stats: NormalizationStats | None = None, target_feature: int | None = None,
                   fill_value: float = 0.0, target_mask=None) -> SpRMSE:
    """Leave-one-node-out RMSE at a one-hour horizon.

    For every node, its pollutant channel(s) are overwritten with
    ``fill_value`` over the whole input history; the model then forecasts and
    the node's first-hour prediction is scored against the truth.  The
    result is the mean of the per-node RMSEs.  ``model`` is either an object
    with ``predict(inputs) -> (B, T', N)`` or such a callable.
    """
    predict = _predictor(model)
    channels = [target_channels] if np.isscalar(target_channels) else list(target_channels)
    feature = windows.target_index if target_feature is None else target_feature
    truth = windows.targets[:, 0, :, 0]
    valid = np.ones(truth.shape, dtype=bool) if target_mask is None else np.asarray(target_mask, bool)
    if stats is not None:
        truth = denormalize(truth, stats, feature)
    n_nodes = windows.inputs.shape[2]
    per_node: list[float | None] = []
    excluded = []
    for node in range(n_nodes):
        if len(windows) == 0 or not valid[:, node].any():
            per_node.append(None)
            excluded.append(node)
            continue
        blanked = windows.inputs.copy()
        blanked[:, :, node, channels] = fill_value
        pred = np.asarray(predict(blanked))[:, 0, node]
        if stats is not None:
            pred = denormalize(pred, stats, feature)
        per_node.append(rmse(pred, truth[:, node], valid[:, node]))
    scored = [v for v in per_node if v is not None]
    if not scored:
        raise UndefinedMetricError("spRMSE: no node has valid targets")
    return SpRMSE(float(np.mean(scored)), per_node, excluded, fill_value, channels)


def sp_rmse(model, windows: WindowSet, target_channels, stats=None, **kw) -> float:
    return sp_rmse_detail(model, windows, target_channels, stats, **kw).value


@dataclass
class EvalReport:
    split: str
    horizon_rmse: list[float]
    overall_rmse: float
    r2: float
    n_windows: int
    n_points: int
    units: str = "dimensionless"
    sp_rmse: float | None = None
    sp_rmse_fill: float | None = None
    sp_rmse_excluded_nodes: list[int] = field(default_factory=list)
    persistence_rmse: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def evaluate(model, windows: WindowSet, stats: NormalizationStats | None = None,
             split: str = "test", with_sp_rmse: bool = False, units: str = "dimensionless",
             predictions: np.ndarray | None = None, batch_size: int = 64) -> EvalReport:
    """Denormalized metrics per horizon and overall."""
    from .train import predict_windows

    feature = windows.target_index
    if predictions is None:
        predictions = predict_windows(model, windows, batch_size)
    truth = windows.targets[..., 0]
    baseline = persistence_forecast(windows)
    if stats is not None:
        predictions = denormalize(predictions, stats, feature)
        truth = denormalize(truth, stats, feature)
        baseline = denormalize(baseline, stats, feature)
    report = EvalReport(
        split=split,
        horizon_rmse=[rmse(predictions[:, h], truth[:, h]) for h in range(truth.shape[1])],
        overall_rmse=rmse(predictions, truth),
        r2=r_squared(predictions, truth),
        n_windows=len(windows),
        n_points=int(truth.size),
        units=units,
        persistence_rmse=rmse(baseline, truth),
    )
    if with_sp_rmse:
        detail = sp_rmse_detail(model, windows, feature, stats)
        report.sp_rmse = detail.value
        report.sp_rmse_fill = detail.fill_value
        report.sp_rmse_excluded_nodes = detail.excluded_nodes
    return report
