"""Segmentation losses with closed-form gradients.

Every loss takes a probability map and a binary truth map of the same shape
and returns a ``LossResult`` whose ``grad`` is d(loss)/d(pred). A single
call treats its whole input as one instance; ``batch_loss`` averages
per-slice losses over the leading axis.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import metrics

CE_CLAMP = 1e-7


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    empty_foreground: bool = False


def _check(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if not np.isin(truth, (0, 1)).all():
        raise ValueError("truth must be binary (0/1)")
    return pred, truth.astype(bool)


def jaccard_loss(pred, truth) -> LossResult:
    """Relaxed Jaccard loss ``1 - sum_fg p / (|Y+| + sum_bg p)``.

    Predictions are clamped to [0, 1] first. A slice with no foreground
    scores ``S / (1 + S)`` where ``S = sum_bg p``, so its gradient still
    pushes background probabilities down.
    """
    pred, fg = _check(pred, truth)
    p = np.clip(pred, 0.0, 1.0)
    inside = (pred >= 0.0) & (pred <= 1.0)
    n_fg = int(fg.sum())
    s_fg = float(p[fg].sum())
    s_bg = float(p[~fg].sum())
    grad = np.zeros_like(p)
    if n_fg == 0:
        denom = 1.0 + s_bg
        grad[~fg] = 1.0 / denom ** 2
        return LossResult(s_bg / denom, grad * inside, empty_foreground=True)
    denom = n_fg + s_bg
    grad[fg] = -1.0 / denom
    grad[~fg] = s_fg / denom ** 2
    return LossResult(1.0 - s_fg / denom, grad * inside)


def cross_entropy_loss(pred, truth) -> LossResult:
    """Pixel-mean binary cross-entropy."""
    pred, fg = _check(pred, truth)
    p = np.clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    inside = (pred > CE_CLAMP) & (pred < 1.0 - CE_CLAMP)
    n = p.size
    value = -(np.log(p[fg]).sum() + np.log1p(-p[~fg]).sum()) / n
    grad = np.where(fg, -1.0 / p, 1.0 / (1.0 - p)) / n
    return LossResult(float(value), grad * inside)


def cbce_loss(pred, truth) -> LossResult:
    """Class-balanced cross-entropy, normalized by the pixel count.

    Foreground terms carry weight ``beta = |Y-|/|Y|`` and background terms
    ``1 - beta``.
    """
    pred, fg = _check(pred, truth)
    p = np.clip(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    inside = (pred > CE_CLAMP) & (pred < 1.0 - CE_CLAMP)
    n = p.size
    beta = float((~fg).sum()) / n
    value = -(beta * np.log(p[fg]).sum() + (1.0 - beta) * np.log1p(-p[~fg]).sum()) / n
    grad = np.where(fg, -beta / p, (1.0 - beta) / (1.0 - p)) / n
    return LossResult(float(value), grad * inside)


LOSSES: dict[str, Callable[..., LossResult]] = {
    "jac": jaccard_loss,
    "ce": cross_entropy_loss,
    "cbce": cbce_loss,
}


def get_loss(kind: str) -> Callable[..., LossResult]:
    try:
        return LOSSES[kind]
    except KeyError:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {sorted(LOSSES)}") from None


def batch_loss(kind: str, pred, truth) -> LossResult:
    """Mean of per-slice losses over the leading axis of ``[N, ...]`` arrays."""
    fn = get_loss(kind)
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    n = pred.shape[0]
    grad = np.empty_like(pred)
    total = 0.0
    empty = False
    for i in range(n):
        r = fn(pred[i], truth[i])
        total += r.value
        grad[i] = r.grad / n
        empty |= r.empty_foreground
    return LossResult(total / n, grad, empty)


@dataclass
class DeepSupervisionResult:
    value: float
    fused_grad: np.ndarray
    unit_grads: list[np.ndarray]
    fused_value: float
    unit_values: list[float]


def deep_supervision_objective(unit_maps: Sequence[np.ndarray], fused: np.ndarray, truth,
                               kind: str = "jac") -> DeepSupervisionResult:
    """``L(fused, Y) + sum_k L(U_k, Y)`` with a gradient for every map.

    Maps may be single slices or ``[N, ...]`` batches; batches use the
    per-slice mean.
    """
    fused = np.asarray(fused, dtype=np.float64)
    for u in unit_maps:
        if np.shape(u) != fused.shape:
            raise ValueError(f"unit map shape {np.shape(u)} != fused shape {fused.shape}")
    batched = fused.ndim == 4
    evaluate = (lambda p: batch_loss(kind, p, truth)) if batched else (lambda p: get_loss(kind)(p, truth))
    top = evaluate(fused)
    units = [evaluate(u) for u in unit_maps]
    value = top.value + sum(r.value for r in units)
    return DeepSupervisionResult(value, top.grad, [r.grad for r in units], top.value, [r.value for r in units])


def default_thresholds() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


def threshold_sweep(pred_volume, truth_volume, thresholds: Sequence[float] | None = None) -> list[tuple[float, float]]:
    """DSC of ``pred >= t`` against the truth for each threshold ``t``."""
    thresholds = default_thresholds() if thresholds is None else list(thresholds)
    if not thresholds:
        raise ValueError("threshold list is empty")
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    pred = np.asarray(pred_volume, dtype=np.float64)
    truth = np.asarray(truth_volume).astype(bool)
    return [(float(t), metrics.dsc(pred >= t, truth)) for t in thresholds]


def dataset_sweep(pred_volumes, truth_volumes, thresholds: Sequence[float] | None = None) -> list[tuple[float, float]]:
    """Mean per-volume DSC at each threshold."""
    if len(pred_volumes) != len(truth_volumes) or not pred_volumes:
        raise ValueError("need equally many (and at least one) prediction and truth volumes")
    sweeps = [threshold_sweep(p, t, thresholds) for p, t in zip(pred_volumes, truth_volumes)]
    return [(sweeps[0][i][0], float(np.mean([s[i][1] for s in sweeps]))) for i in range(len(sweeps[0]))]


def dsc_range(sweep: Sequence[tuple[float, float]]) -> float:
    values = [d for _, d in sweep]
    return max(values) - min(values)


def write_sweep_csv(path, rows: Sequence[tuple[float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "dsc"])
        for t, d in rows:
            w.writerow([f"{t:.6f}", f"{d:.6f}"])
