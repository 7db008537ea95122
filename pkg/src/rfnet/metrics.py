"""Saliency evaluation measures: MAE, adaptive F-measure, S-measure, E-measure.

Predictions are real maps in [0, 1]; ground truth is binary. Inputs may be
``H x W`` or ``1 x H x W``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

EPS = np.finfo(np.float64).eps
REPORT_FIELDS = ["sample_id", "mae", "f", "s", "e"]


def _prep(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt)
    p = p[0] if p.ndim == 3 else p
    g = g[0] if g.ndim == 3 else g
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g > 0.5


def adaptive_threshold(pred: np.ndarray) -> float:
    return min(2.0 * float(np.mean(pred)), 1.0)


def binarize(p: np.ndarray, t: float) -> np.ndarray:
    """``p >= t``; a zero prediction is never foreground, so an all-zero map stays empty."""
    return (p >= t) & (p > 0)


def mae(pred, gt) -> float:
    p, _ = _prep(pred, gt)
    g = np.asarray(gt, dtype=np.float64).reshape(p.shape)
    return float(np.mean(np.abs(p - g)))


def f_measure(pred, gt, beta2: float = 0.3, threshold: Optional[float] = None) -> float:
    """F-measure at ``threshold`` (default: adaptive, twice the mean prediction capped at 1)."""
    p, g = _prep(pred, gt)
    t = adaptive_threshold(p) if threshold is None else threshold
    binary = binarize(p, t)
    tp = int(np.count_nonzero(binary & g))
    if tp == 0:
        return 0.0
    precision = tp / int(np.count_nonzero(binary))
    recall = tp / int(np.count_nonzero(g))
    return (1 + beta2) * precision * recall / (beta2 * precision + recall)


# -- structure measure -------------------------------------------------------

def _object_score(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    mu = float(x.mean())
    sigma = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _s_object(p: np.ndarray, g: np.ndarray) -> float:
    fg = np.where(g, p, 0.0)
    bg = np.where(~g, 1.0 - p, 0.0)
    u = g.mean()
    return u * _object_score(fg[g]) + (1 - u) * _object_score(bg[~g])


def _ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    x, y = p.mean(), g.mean()
    # eps keeps single-pixel blocks finite (they score 1)
    sx = ((p - x) ** 2).sum() / (n - 1 + EPS)
    sy = ((g - y) ** 2).sum() / (n - 1 + EPS)
    sxy = ((p - x) * (g - y)).sum() / (n - 1 + EPS)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + EPS))
    return 1.0 if b == 0 else 0.0


def _centroid(g: np.ndarray) -> Tuple[int, int]:
    h, w = g.shape
    if not g.any():
        return int(round(w / 2)), int(round(h / 2))
    ys, xs = np.nonzero(g)
    # 1-based centroid, rounded half away from zero like the reference code
    return int(np.floor(xs.mean() + 1.5)), int(np.floor(ys.mean() + 1.5))


def _s_region(p: np.ndarray, g: np.ndarray) -> float:
    h, w = g.shape
    x, y = _centroid(g)
    x, y = min(x, w), min(y, h)
    area = h * w
    weights = [x * y / area, (w - x) * y / area, x * (h - y) / area]
    weights.append(1.0 - sum(weights))
    blocks = [(slice(0, y), slice(0, x)), (slice(0, y), slice(x, w)),
              (slice(y, h), slice(0, x)), (slice(y, h), slice(x, w))]
    score = 0.0
    for wt, (rs, cs) in zip(weights, blocks):
        if p[rs, cs].size:
            score += wt * _ssim(p[rs, cs].ravel(), g[rs, cs].ravel().astype(np.float64))
    return score


def s_measure(pred, gt, alpha: float = 0.5) -> float:
    """Structure measure; all-background gt scores ``1 - mean(pred)``, all-foreground ``mean(pred)``."""
    p, g = _prep(pred, gt)
    y = g.mean()
    if y == 0:
        score = 1.0 - p.mean()
    elif y == 1:
        score = p.mean()
    else:
        score = alpha * _s_object(p, g) + (1 - alpha) * _s_region(p, g)
    return float(min(max(score, 0.0), 1.0))


# -- enhanced alignment measure ----------------------------------------------

def enhanced_alignment(binary: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Per-pixel enhanced alignment phi = (xi + 1)^2 / 4."""
    fm = binary.astype(np.float64)
    gf = g.astype(np.float64)
    if not g.any():
        return 1.0 - fm
    if g.all():
        return fm
    af = fm - fm.mean()
    ag = gf - gf.mean()
    xi = 2.0 * af * ag / (af * af + ag * ag + EPS)
    return (xi + 1.0) ** 2 / 4.0


def e_measure(pred, gt, threshold: Optional[float] = None) -> float:
    p, g = _prep(pred, gt)
    t = adaptive_threshold(p) if threshold is None else threshold
    return float(enhanced_alignment(binarize(p, t), g).mean())


# -- aggregation --------------------------------------------------------------

@dataclass
class MetricsReport:
    mae: float
    f_measure: float
    s_measure: float
    e_measure: float
    count: int

    def as_row(self, sample_id: str = "mean") -> list:
        return [sample_id, self.mae, self.f_measure, self.s_measure, self.e_measure]


def evaluate_sample(pred, gt) -> Tuple[float, float, float, float]:
    return mae(pred, gt), f_measure(pred, gt), s_measure(pred, gt), e_measure(pred, gt)


def aggregate(rows: Sequence[Tuple[float, float, float, float]]) -> MetricsReport:
    if not rows:
        raise ValueError("no samples to aggregate")
    cols = list(zip(*rows))
    return MetricsReport(*(math.fsum(c) / len(c) for c in cols), count=len(rows))


def evaluate_maps(preds: Iterable, gts: Iterable, ids: Optional[Sequence[str]] = None):
    """Per-sample metric rows and their mean report."""
    rows = [evaluate_sample(p, g) for p, g in zip(preds, gts)]
    ids = list(ids) if ids is not None else [f"{i:04d}" for i in range(len(rows))]
    return list(zip(ids, rows)), aggregate(rows)


def write_report(path, per_sample, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_FIELDS)
        for sid, (m, f, s, e) in per_sample:
            writer.writerow([sid, repr(m), repr(f), repr(s), repr(e)])
        writer.writerow(["mean"] + [repr(v) for v in report.as_row()[1:]])
