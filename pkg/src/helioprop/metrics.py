"""Evaluation suite: MSE, Sobel-masked edge MSE, EMD, and UIQI.

All cube-level metrics exclude slice 0 (the shared input boundary) and are
reported per radial slice plus as the average over slices. The edge mask is
always computed from the ground truth, never from the prediction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .sphere_grid import VelocityCube, VelocityMap


class MetricUndefinedError(RuntimeError):
    """No slice carries an edge mask, so edge MSE has no value."""


@dataclass(frozen=True)
class EdgeMaskConfig:
    """Sobel mask: gradient magnitude above a fraction of its per-slice max.

    Longitude wraps periodically; latitude is replicate-padded (no data
    beyond the poles).
    """

    threshold_fraction: float = 0.2

    def __post_init__(self):
        if not (0.0 < self.threshold_fraction < 1.0):
            raise ValueError("threshold_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class MetricsConfig:
    edge: EdgeMaskConfig = EdgeMaskConfig()
    uiqi_window: int | None = None  # None: one global window per slice


def _values(obj) -> np.ndarray:
    if isinstance(obj, VelocityMap):
        return obj.values
    return np.asarray(obj, dtype=np.float64)


def _check_pair(pred: VelocityCube, truth: VelocityCube):
    if pred.grid.shape != truth.grid.shape or pred.nr != truth.nr:
        raise ValueError(
            f"cube mismatch: pred {(pred.nr,) + pred.grid.shape} "
            f"vs truth {(truth.nr,) + truth.grid.shape}"
        )


def mse(pred: VelocityCube, truth: VelocityCube):
    """Per-slice mean squared error over slices 1..nr-1, plus their average."""
    _check_pair(pred, truth)
    per_slice = np.mean((pred.values[1:] - truth.values[1:]) ** 2, axis=(1, 2))
    return per_slice, float(per_slice.mean())


def sobel_gradient_magnitude(slice_values) -> np.ndarray:
    """3x3 Sobel gradient magnitude with wrap in longitude, replicate in latitude."""
    x = _values(slice_values)
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise ValueError(f"slice {x.shape} too small for a 3x3 filter")
    p = np.concatenate([x[:1], x, x[-1:]], axis=0)
    p = np.concatenate([p[:, -1:], p, p[:, :1]], axis=1)
    nlat, nlon = x.shape

    def sub(a, b):
        return p[a : a + nlat, b : b + nlon]

    gx = (sub(0, 2) - sub(0, 0)) + 2.0 * (sub(1, 2) - sub(1, 0)) + (sub(2, 2) - sub(2, 0))
    gy = (sub(2, 0) - sub(0, 0)) + 2.0 * (sub(2, 1) - sub(0, 1)) + (sub(2, 2) - sub(0, 2))
    return np.hypot(gx, gy)


def sobel_edge_mask(truth_slice, cfg: EdgeMaskConfig = EdgeMaskConfig()) -> np.ndarray:
    """High-gradient mask; an all-equal slice yields an empty mask."""
    g = sobel_gradient_magnitude(truth_slice)
    gmax = g.max()
    if gmax == 0.0:
        return np.zeros(g.shape, dtype=bool)
    return g > cfg.threshold_fraction * gmax


def edge_mse(pred: VelocityCube, truth: VelocityCube, cfg: EdgeMaskConfig = EdgeMaskConfig()):
    """MSE restricted to truth-derived edge pixels.

    Returns (per_slice, mean_over_masked_slices, n_empty); slices with an
    empty mask hold NaN and are excluded from the mean.
    """
    _check_pair(pred, truth)
    per_slice = np.full(truth.nr - 1, np.nan)
    for i in range(1, truth.nr):
        mask = sobel_edge_mask(truth.values[i], cfg)
        if mask.any():
            d = pred.values[i][mask] - truth.values[i][mask]
            per_slice[i - 1] = np.mean(d * d)
    valid = ~np.isnan(per_slice)
    if not valid.any():
        raise MetricUndefinedError("every slice has an empty edge mask")
    return per_slice, float(per_slice[valid].mean()), int((~valid).sum())


def emd(pred_slice, truth_slice) -> float:
    """Wasserstein-1 between the two pixel-value distributions.

    Equal pixel counts make the sorted-sample formula exact:
    mean |sort(x) - sort(y)|.
    """
    x = _values(pred_slice).ravel()
    y = _values(truth_slice).ravel()
    if x.size != y.size:
        raise ValueError(f"pixel counts differ: {x.size} vs {y.size}")
    return float(np.mean(np.abs(np.sort(x) - np.sort(y))))


def _uiqi_global(x: np.ndarray, y: np.ndarray) -> float:
    n = x.size
    mx, my = x.mean(), y.mean()
    dx = x - mx
    dy = y - my
    vx = np.sum(dx * dx) / (n - 1)
    vy = np.sum(dy * dy) / (n - 1)
    if vx + vy == 0.0:  # both constant
        return 1.0 if mx == my else 0.0
    denom = (vx + vy) * (mx * mx + my * my)
    if denom == 0.0:
        return 0.0
    cov = np.sum(dx * dy) / (n - 1)
    # |Q| <= 1 by AM-GM; clip away the last-ulp overshoot
    return float(np.clip(4.0 * cov * mx * my / denom, -1.0, 1.0))


def uiqi(pred_slice, truth_slice, window: int | None = None) -> float:
    """Universal image quality index in [-1, 1]; 1 for identical slices.

    Computed over the whole slice by default; ``window`` switches to the
    original sliding-window mean (stride 1, full windows only).
    """
    x = _values(pred_slice)
    y = _values(truth_slice)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 pixels")
    if window is None:
        return _uiqi_global(x.ravel(), y.ravel())
    if window < 2 or window > min(x.shape):
        raise ValueError(f"window {window} does not fit slice {x.shape}")
    from numpy.lib.stride_tricks import sliding_window_view

    xw = sliding_window_view(x, (window, window)).reshape(-1, window * window)
    yw = sliding_window_view(y, (window, window)).reshape(-1, window * window)
    vals = [_uiqi_global(xi, yi) for xi, yi in zip(xw, yw)]
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    """Per-slice and cube-mean metrics for one (prediction, truth) pair."""

    per_slice_mse: np.ndarray
    per_slice_edge_mse: np.ndarray  # NaN where the edge mask is empty
    per_slice_emd: np.ndarray
    per_slice_uiqi: np.ndarray
    mean_mse: float
    mean_edge_mse: float
    mean_emd: float
    mean_uiqi: float
    n_empty_edge_slices: int
    config: MetricsConfig
    meta: dict

    def to_dict(self) -> dict:
        def listify(a):
            return [None if np.isnan(v) else float(v) for v in a]

        return {
            "schema": "helioprop-metrics-report",
            "version": 1,
            "meta": self.meta,
            "config": {
                "edge_threshold_fraction": self.config.edge.threshold_fraction,
                "uiqi_window": self.config.uiqi_window,
            },
            "n_slices": int(self.per_slice_mse.size),
            "n_empty_edge_slices": self.n_empty_edge_slices,
            "per_slice": {
                "mse": listify(self.per_slice_mse),
                "edge_mse": listify(self.per_slice_edge_mse),
                "emd": listify(self.per_slice_emd),
                "uiqi": listify(self.per_slice_uiqi),
            },
            "cube_mean": {
                "mse": self.mean_mse,
                "edge_mse": self.mean_edge_mse,
                "emd": self.mean_emd,
                "uiqi": self.mean_uiqi,
            },
        }


def evaluate_cube(
    pred: VelocityCube,
    truth: VelocityCube,
    cfg: MetricsConfig = MetricsConfig(),
    meta: dict | None = None,
) -> MetricsReport:
    """Full metric sweep over slices 1..nr-1 (slice 0 is the shared input)."""
    _check_pair(pred, truth)
    per_mse, mean_mse_ = mse(pred, truth)
    per_edge, mean_edge, n_empty = edge_mse(pred, truth, cfg.edge)
    per_emd = np.array([emd(pred.values[i], truth.values[i]) for i in range(1, truth.nr)])
    per_uiqi = np.array(
        [uiqi(pred.values[i], truth.values[i], cfg.uiqi_window) for i in range(1, truth.nr)]
    )
    return MetricsReport(
        per_slice_mse=per_mse,
        per_slice_edge_mse=per_edge,
        per_slice_emd=per_emd,
        per_slice_uiqi=per_uiqi,
        mean_mse=mean_mse_,
        mean_edge_mse=mean_edge,
        mean_emd=float(per_emd.mean()),
        mean_uiqi=float(per_uiqi.mean()),
        n_empty_edge_slices=n_empty,
        config=cfg,
        meta=meta or {},
    )


def write_report_json(report: MetricsReport, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_csv(reports: dict[str, MetricsReport], path):
    """One summary row per cube."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cube", "mse", "edge_mse", "emd", "uiqi", "empty_edge_slices"])
        for name, rep in reports.items():
            writer.writerow(
                [name, rep.mean_mse, rep.mean_edge_mse, rep.mean_emd, rep.mean_uiqi,
                 rep.n_empty_edge_slices]
            )


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["schema", "version", "meta", "config", "n_slices",
                 "n_empty_edge_slices", "per_slice", "cube_mean"],
    "properties": {
        "schema": {"const": "helioprop-metrics-report"},
        "version": {"type": "integer"},
        "meta": {"type": "object"},
        "config": {
            "type": "object",
            "required": ["edge_threshold_fraction", "uiqi_window"],
            "properties": {
                "edge_threshold_fraction": {"type": "number", "exclusiveMinimum": 0,
                                            "exclusiveMaximum": 1},
                "uiqi_window": {"type": ["integer", "null"]},
            },
        },
        "n_slices": {"type": "integer", "minimum": 1},
        "n_empty_edge_slices": {"type": "integer", "minimum": 0},
        "per_slice": {
            "type": "object",
            "required": ["mse", "edge_mse", "emd", "uiqi"],
            "properties": {
                "mse": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "edge_mse": {"type": "array",
                             "items": {"type": ["number", "null"], "minimum": 0}},
                "emd": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "uiqi": {"type": "array",
                         "items": {"type": "number", "minimum": -1, "maximum": 1}},
            },
        },
        "cube_mean": {
            "type": "object",
            "required": ["mse", "edge_mse", "emd", "uiqi"],
            "properties": {k: {"type": "number"} for k in ("mse", "edge_mse", "emd", "uiqi")},
        },
    },
}
