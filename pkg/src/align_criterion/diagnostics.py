"""
Misalignment diagnostics between classification confidence and localization.

A prediction's confidence is its maximum class probability; its IoU is the
IoU with the ground truth it overlaps most. The best-regressed (BR) sample
of a GT is the prediction with the highest IoU against it, and the
high-confidence (HC) set is the top ``m * N`` predictions by confidence,
``N`` being the GT count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_iou
from .structures import PredictionSet, Scene


class UndefinedCorrelation(ValueError):
    """Pearson correlation requested for an input with zero variance."""


def _best_regressed(preds: PredictionSet, gts: Scene) -> np.ndarray:
    ious = pairwise_iou(preds.boxes, gts.boxes)
    # argmax returns the first maximum: ties go to the lower prediction index
    return np.argmax(ious, axis=0)


def _confidence_order(conf: np.ndarray) -> np.ndarray:
    return np.argsort(-conf, kind="stable")


def br_hits(preds: PredictionSet, gts: Scene, m: int) -> tuple[int, int]:
    """``(GTs whose BR sample is in the top m*N, N)``."""
    n_gt = len(gts)
    if n_gt == 0:
        raise ValueError("br_recall needs at least one ground truth")
    if m < 1:
        raise ValueError("m must be a positive integer")
    br = _best_regressed(preds, gts)
    hc = set(_confidence_order(preds.confidence)[: m * n_gt].tolist())
    return sum(int(b in hc) for b in br), n_gt


def br_recall(preds: PredictionSet, gts: Scene, m: int = 1) -> float:
    hits, n = br_hits(preds, gts, m)
    return hits / n


def dataset_br_recall(samples, m: int = 1, pooled: bool = False) -> float:
    """BR recall over ``(preds, scene)`` pairs.

    Default is the unweighted mean of per-scene recalls; ``pooled`` divides
    total hits by total GTs instead.
    """
    hits = [br_hits(p, g, m) for p, g in samples]
    if not hits:
        raise ValueError("no scenes given")
    if pooled:
        return sum(h for h, _ in hits) / sum(n for _, n in hits)
    return math.fsum(h / n for h, n in hits) / len(hits)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ValueError("pearson needs two 1-D sequences of equal length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("zero variance input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def density_map(confidences, ious, bins: int = 10) -> np.ndarray:
    """Counts ``[bins, bins]`` over (confidence, IoU) on the unit square.

    Confidences are divided by their maximum first.
    """
    conf = np.asarray(confidences, dtype=float)
    ious = np.asarray(ious, dtype=float)
    if bins < 2:
        raise ValueError("bins must be >= 2")
    if conf.size == 0:
        raise ValueError("density_map needs at least one sample")
    top = conf.max()
    if top <= 0:
        raise ValueError("confidences must have a positive maximum")
    counts, _, _ = np.histogram2d(conf / top, ious, bins=bins, range=[[0, 1], [0, 1]])
    return counts.astype(int)


def sample_scores(preds: PredictionSet, gts: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Per prediction: max class probability and IoU with its best-overlapping GT."""
    ious = pairwise_iou(preds.boxes, gts.boxes)
    return preds.confidence, ious.max(axis=1)


def iou_histograms(preds: PredictionSet, gts: Scene, bins: int = 10, m: int = 1):
    """IoU histograms ``(hc, br, edges)`` of the HC set and the BR samples."""
    conf, best_iou = sample_scores(preds, gts)
    hc = _confidence_order(conf)[: m * len(gts)]
    br = _best_regressed(preds, gts)
    edges = np.linspace(0.0, 1.0, bins + 1)
    hc_hist, _ = np.histogram(best_iou[hc], bins=edges)
    br_hist, _ = np.histogram(best_iou[br], bins=edges)
    return hc_hist, br_hist, edges


@dataclass
class AlignmentReport:
    br_recall_at: dict[int, float]
    pearson_r: float
    density: np.ndarray | None = None
    hc_iou_hist: np.ndarray | None = None
    br_iou_hist: np.ndarray | None = None
    bin_edges: np.ndarray | None = field(default=None, repr=False)


def alignment_report(
    samples,
    ms=(1, 2, 3),
    bins: int = 10,
    pooled: bool = False,
    full: bool = True,
) -> AlignmentReport:
    """Recall-vs-m, Pearson r and (when ``full``) density map and histograms.

    ``samples`` is a list of ``(preds, scene)``. Pearson and the density map
    pool all predictions of all scenes; ``pearson_r`` is NaN when either
    score has zero variance.
    """
    samples = list(samples)
    recall = {m: dataset_br_recall(samples, m, pooled) for m in ms}
    confs, ious = [], []
    for p, g in samples:
        c, u = sample_scores(p, g)
        confs.append(c)
        ious.append(u)
    conf, iou = np.concatenate(confs), np.concatenate(ious)
    try:
        r = pearson(conf, iou)
    except UndefinedCorrelation:
        r = float("nan")
    if not full:
        return AlignmentReport(recall, r)
    hc_total = br_total = None
    edges = None
    for p, g in samples:
        hc, br, edges = iou_histograms(p, g, bins)
        hc_total = hc if hc_total is None else hc_total + hc
        br_total = br if br_total is None else br_total + br
    return AlignmentReport(recall, r, density_map(conf, iou, bins), hc_total, br_total, edges)
