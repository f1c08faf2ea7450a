"""Test-set metrics: MIoU, depth RMSE in r-space, RMSCTD, accuracy."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .losses import TaskId, sctd

METRIC_FOR_TASK = {
    TaskId.SEG: "miou",
    TaskId.DEPTH: "depth_rmse_r",
    TaskId.TIME: "rmsctd_min",
    TaskId.WEATHER: "weather_acc",
}


@dataclass
class MetricRecord:
    iteration: int
    miou: float | None = None
    depth_rmse_r: float | None = None
    rmsctd_min: float | None = None
    weather_acc: float | None = None

    def present(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "iteration" and getattr(self, f.name) is not None}


def _nonempty(*arrays):
    for a in arrays:
        if np.asarray(a).size == 0:
            raise ValueError("metric inputs must be non-empty")


def miou(pred, gt, k: int, classes=None) -> float:
    """Mean IoU over classes occurring in ``pred`` or ``gt``.

    ``classes`` restricts the mean to a subset of ids (e.g. objects only);
    by default all ``k`` classes take part.  Returns nan if none of the
    selected classes occurs.
    """
    pred = np.asarray(pred).astype(np.int64).ravel()
    gt = np.asarray(gt).astype(np.int64).ravel()
    _nonempty(pred, gt)
    if pred.shape != gt.shape:
        raise ValueError(f"miou: shape mismatch {pred.shape} vs {gt.shape}")
    if max(pred.max(), gt.max()) >= k or min(pred.min(), gt.min()) < 0:
        raise ValueError(f"miou: ids must lie in [0, {k})")
    conf = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - inter
    seen = union > 0
    if classes is not None:
        keep = np.zeros(k, dtype=bool)
        keep[list(classes)] = True
        seen &= keep
        if not seen.any():
            return float("nan")
    return float(np.mean(inter[seen] / union[seen]))


def depth_rmse(pred_r, gt_r) -> float:
    pred_r, gt_r = np.asarray(pred_r, np.float64), np.asarray(gt_r, np.float64)
    _nonempty(pred_r, gt_r)
    if pred_r.shape != gt_r.shape:
        raise ValueError(f"depth_rmse: shape mismatch {pred_r.shape} vs {gt_r.shape}")
    return float(np.sqrt(np.mean((pred_r - gt_r) ** 2)))


def rmsctd(t_gt, t_pred) -> float:
    """Root mean squared cyclic time difference, in minutes (unscaled)."""
    t_gt, t_pred = np.ravel(t_gt), np.ravel(t_pred)
    _nonempty(t_gt, t_pred)
    if t_gt.shape != t_pred.shape:
        raise ValueError("rmsctd: length mismatch")
    return float(np.sqrt(np.mean(sctd(t_gt, t_pred))))


def accuracy(pred, gt) -> float:
    pred, gt = np.ravel(pred), np.ravel(gt)
    _nonempty(pred, gt)
    if pred.shape != gt.shape:
        raise ValueError("accuracy: length mismatch")
    return float(np.mean(pred == gt))
