"""Confusion-matrix segmentation metrics."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred, truth) -> np.ndarray:
    """Add counts (rows = truth, cols = prediction) and return the new matrix."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    n = cm.shape[0]
    if pred.size == 0:
        return cm.copy()
    if pred.min() < 0 or truth.min() < 0 or pred.max() >= n or truth.max() >= n:
        raise ValueError(f"class id outside [0, {n})")
    idx = truth.reshape(-1).astype(np.int64) * n + pred.reshape(-1).astype(np.int64)
    return cm + np.bincount(idx, minlength=n * n).reshape(n, n)


@dataclass
class Scores:
    iou: np.ndarray  # NaN where the class is absent from pred and truth
    miou: float
    pa: float
    mpa: float


def iou_scores(cm: np.ndarray) -> Scores:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(cm).astype(np.float64)
    gt = cm.sum(axis=1)
    union = gt + cm.sum(axis=0) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        recall = np.where(gt > 0, tp / gt, np.nan)
    return Scores(iou, float(np.nanmean(iou)), float(tp.sum() / total), float(np.nanmean(recall)))


def write_iou_table(path: str | os.PathLike, rows: dict[str, Scores], class_names=None) -> None:
    """CSV with one row per method: per-class IoU columns then mIoU (percent)."""
    n = len(next(iter(rows.values())).iou)
    class_names = class_names or [f"class{c}" for c in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *class_names, "mIoU"])
        for name, s in rows.items():
            w.writerow([name, *(f"{100 * v:.2f}" if np.isfinite(v) else "" for v in s.iou), f"{100 * s.miou:.2f}"])
