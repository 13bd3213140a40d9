"""Overlap and surface-distance metrics for binary masks.

Conventions: two empty masks have DSC = JI = 1; empty against non-empty
scores 0. Surface voxels are mask voxels with at least one face neighbour
(4-neighbourhood in 2-D, 6 in 3-D) outside the mask; the grid border counts
as outside.
"""
from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

ABNORMAL_CHANGE_MM = 0.5
VOLUME_TOLERANCE = 0.15
CSV_COLUMNS = ("case_id", "dsc", "ji", "precision", "recall", "avd_mm")


class UndefinedMetricError(ValueError):
    """The metric has no value for the given masks (e.g. AVD of an empty mask)."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dsc(a, b) -> float:
    a, b = _pair(a, b)
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def jaccard_index(a, b) -> float:
    a, b = _pair(a, b)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def precision_recall(pred, truth) -> tuple[float, float]:
    p, t = _pair(pred, truth)
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    precision = 1.0 if tp + fp == 0 else tp / (tp + fp)
    recall = 1.0 if tp + fn == 0 else tp / (tp + fn)
    return precision, recall


def surface_voxels(mask) -> np.ndarray:
    """Boolean map of face-connected boundary voxels."""
    m = np.asarray(mask).astype(bool)
    structure = ndimage.generate_binary_structure(m.ndim, 1)
    return m & ~ndimage.binary_erosion(m, structure=structure, border_value=0)


def _surface_points(mask, spacing: Sequence[float]) -> np.ndarray:
    return np.argwhere(surface_voxels(mask)) * np.asarray(spacing, dtype=np.float64)


def _nearest(src: np.ndarray, dst: np.ndarray, tree: cKDTree) -> np.ndarray:
    # the tree proposes candidates; distances are recomputed with one
    # fixed formula so the result does not depend on tree traversal order
    d0, _ = tree.query(src)
    out = np.empty(len(src))
    for i, (p, r) in enumerate(zip(src, d0)):
        cand = tree.query_ball_point(p, r * (1 + 1e-9) + 1e-12)
        diff = dst[cand] - p
        out[i] = np.sqrt((diff * diff).sum(axis=1)).min()
    return out


def directed_mean_distance(src: np.ndarray, dst: np.ndarray) -> float:
    # fsum is correctly rounded, so the mean does not depend on point order
    return math.fsum(_nearest(src, dst, cKDTree(dst)).tolist()) / len(src)


def avd(a, b, spacing_mm: Sequence[float], variant: str = "mean") -> float:
    """Averaged Hausdorff distance between the surfaces of two masks, in mm.

    ``variant="mean"`` averages the two directed mean surface distances;
    ``variant="max"`` takes the larger of the two.
    """
    a, b = _pair(a, b)
    if len(spacing_mm) != a.ndim or any(s <= 0 for s in spacing_mm):
        raise ValueError(f"spacing {tuple(spacing_mm)} invalid for {a.ndim}-D masks")
    if not a.any() or not b.any():
        raise UndefinedMetricError("AVD is undefined when either mask is empty")
    pa, pb = _surface_points(a, spacing_mm), _surface_points(b, spacing_mm)
    dab = directed_mean_distance(pa, pb)
    dba = directed_mean_distance(pb, pa)
    if variant == "mean":
        return 0.5 * (dab + dba)
    if variant == "max":
        return max(dab, dba)
    raise ValueError(f"unknown AVD variant {variant!r}")


@dataclass
class VolumeRegression:
    r_squared: float
    error_variance: float
    slope: float
    intercept: float
    flagged: list[int] = field(default_factory=list)


def volume_regression(pairs: Sequence[tuple[float, float]], tolerance: float = VOLUME_TOLERANCE) -> VolumeRegression:
    """Least-squares fit of automatic against manual volumes.

    ``error_variance`` is the sample variance (ddof=1) of ``auto - manual``;
    ``flagged`` lists pairs whose relative error exceeds ``tolerance``.
    """
    if len(pairs) < 3:
        raise ValueError(f"volume_regression needs at least 3 pairs, got {len(pairs)}")
    arr = np.asarray(pairs, dtype=np.float64)
    x, y = arr[:, 0], arr[:, 1]
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ValueError("manual volumes are all equal; regression is undefined")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_res = ((y - (slope * x + intercept)) ** 2).sum()
    ss_tot = ((y - ym) ** 2).sum()
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    err = y - x
    flagged = [i for i, (m, a) in enumerate(zip(x, y)) if m > 0 and abs(a - m) / m > tolerance]
    return VolumeRegression(float(r2), float(err.var(ddof=1)), float(slope), float(intercept), flagged)


@dataclass
class ShapeChangeReport:
    abnormal: list[int]
    empty_transitions: list[int]
    distances: dict[int, float]


def abnormal_shape_changes(slices, spacing_mm: Sequence[float],
                           threshold_mm: float = ABNORMAL_CHANGE_MM) -> ShapeChangeReport:
    """Flag slice indices whose in-plane AVD to the previous slice exceeds ``threshold_mm``.

    ``spacing_mm`` is the in-plane ``(row, col)`` spacing, or a 3-tuple whose
    first (axial) entry is ignored. Transitions between an empty and a
    non-empty slice are listed separately.
    """
    seq = np.asarray(slices).astype(bool)
    if seq.ndim != 3 or seq.shape[0] < 2:
        raise ValueError(f"need a sequence of at least two 2-D slices, got shape {seq.shape}")
    inplane = tuple(spacing_mm)[-2:]
    abnormal, empty, dist = [], [], {}
    for t in range(1, seq.shape[0]):
        prev, cur = seq[t - 1], seq[t]
        if not prev.any() and not cur.any():
            continue
        if not prev.any() or not cur.any():
            empty.append(t)
            continue
        d = avd(cur, prev, inplane)
        dist[t] = d
        if d > threshold_mm:
            abnormal.append(t)
    return ShapeChangeReport(abnormal, empty, dist)


def inter_slice_avd(mask_volume, spacing_mm: Sequence[float]) -> list[float]:
    """In-plane AVD between every pair of consecutive non-empty slices."""
    return list(abnormal_shape_changes(mask_volume, spacing_mm, math.inf).distances.values())


@dataclass
class CaseMetrics:
    case_id: str
    dsc: float
    ji: float
    precision: float
    recall: float
    avd_mm: float


def case_metrics(case_id: str, pred, truth, spacing_mm: Sequence[float]) -> CaseMetrics:
    p, r = precision_recall(pred, truth)
    try:
        d = avd(pred, truth, spacing_mm)
    except UndefinedMetricError:
        d = math.nan
    return CaseMetrics(case_id, dsc(pred, truth), jaccard_index(pred, truth), p, r, d)


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]
    label: str = ""

    def values(self, metric: str) -> list[float]:
        return [getattr(c, metric) for c in self.cases]

    def aggregate(self, metric: str) -> dict[str, float]:
        vals = [v for v in self.values(metric) if not math.isnan(v)]
        if not vals:
            return {"mean": math.nan, "stdev": math.nan, "min": math.nan, "max": math.nan}
        return {"mean": statistics.fmean(vals),
                "stdev": statistics.stdev(vals) if len(vals) > 1 else 0.0,
                "min": min(vals), "max": max(vals)}

    def mean(self, metric: str) -> float:
        return self.aggregate(metric)["mean"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cases:
            w.writerow([c.case_id] + [f"{getattr(c, k):.6f}" for k in CSV_COLUMNS[1:]])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{self.label} " if self.label else ""
        lines = [f"{head}cases: {len(self.cases)}"]
        for metric in CSV_COLUMNS[1:]:
            a = self.aggregate(metric)
            lines.append(f"{metric:>9}: mean {a['mean']:.4f}  stdev {a['stdev']:.4f}  "
                         f"min {a['min']:.4f}  max {a['max']:.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, label: str = "") -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_COLUMNS:
            raise ValueError(f"report header must be {','.join(CSV_COLUMNS)}")
        cases = [CaseMetrics(r[0], *(float(v) for v in r[1:])) for r in rows[1:]]
        return cls(cases, label)
