import statistics

import numpy as np
import pytest

from align_criterion.diagnostics import (
    UndefinedCorrelation,
    alignment_report,
    br_recall,
    dataset_br_recall,
    density_map,
    iou_histograms,
    pearson,
)
from align_criterion.geometry import Box
from align_criterion.structures import GroundTruth, PredictionSet, Scene


def _scene(*boxes):
    return Scene(2, tuple(GroundTruth(0, Box(*b)) for b in boxes))


GT = (0.5, 0.5, 0.2, 0.2)
# IoU with GT decreasing down the list
LADDER = [[0.5, 0.5, 0.2, 0.2], [0.52, 0.5, 0.2, 0.2], [0.56, 0.5, 0.2, 0.2], [0.6, 0.55, 0.2, 0.2]]


def test_br_recall_aligned_and_anti_aligned():
    scene = _scene(GT)
    aligned = PredictionSet([[0.9, 0], [0.7, 0], [0.5, 0], [0.2, 0]], LADDER)
    anti = PredictionSet([[0.2, 0], [0.5, 0], [0.7, 0], [0.9, 0]], LADDER)
    assert br_recall(aligned, scene, 1) == 1.0
    assert br_recall(anti, scene, 1) == 0.0
    assert br_recall(anti, scene, 4) == 1.0


def test_br_recall_invariant_under_monotone_transform():
    rng = np.random.default_rng(0)
    scene = _scene(GT, (0.3, 0.3, 0.1, 0.1))
    boxes = np.column_stack([rng.uniform(0.2, 0.7, (12, 2)), rng.uniform(0.05, 0.3, (12, 2))])
    scores = rng.uniform(0.01, 0.99, (12, 2))
    a = PredictionSet(scores, boxes)
    b = PredictionSet(scores**3, boxes)
    for m in (1, 2, 3):
        assert br_recall(a, scene, m) == br_recall(b, scene, m)


def test_br_recall_full_coverage():
    rng = np.random.default_rng(1)
    scene = _scene(GT, (0.3, 0.3, 0.1, 0.1))
    preds = PredictionSet(rng.uniform(size=(7, 2)), np.tile(LADDER[1], (7, 1)) + rng.uniform(0, 0.05, (7, 4)))
    assert br_recall(preds, scene, m=4) == 1.0


def test_br_recall_errors():
    preds = PredictionSet([[0.5, 0.1]], [LADDER[0]])
    with pytest.raises(ValueError):
        br_recall(preds, Scene(2), 1)
    with pytest.raises(ValueError):
        br_recall(preds, _scene(GT), 0)


def test_dataset_recall_mean_versus_pooled():
    one = _scene(GT)
    two = _scene(GT, (0.2, 0.2, 0.1, 0.1))
    hit = PredictionSet([[0.9, 0], [0.1, 0]], [LADDER[0], LADDER[3]])
    # second scene: one GT hit, the other's BR sample ranked last
    half = PredictionSet([[0.9, 0], [0.8, 0], [0.1, 0]], [LADDER[0], LADDER[3], [0.2, 0.2, 0.1, 0.1]])
    samples = [(hit, one), (half, two)]
    assert dataset_br_recall(samples, 1) == pytest.approx(0.75)
    assert dataset_br_recall(samples, 1, pooled=True) == pytest.approx(2 / 3)


def test_pearson_examples():
    x = [0.1, 0.5, 0.9]
    assert pearson(x, x) == pytest.approx(1.0)
    assert pearson(x, [1 - v for v in x]) == pytest.approx(-1.0)
    # independent oracle: the standard library's implementation
    assert pearson(x, [0.2, 0.4, 0.9]) == pytest.approx(statistics.correlation(x, [0.2, 0.4, 0.9]), abs=1e-12)


def test_pearson_affine_invariance():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert pearson(3 * x + 1, 0.5 * y - 2) == pytest.approx(pearson(x, y), abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(UndefinedCorrelation):
        pearson([0.3, 0.3, 0.3], [0.1, 0.2, 0.3])
    with pytest.raises(ValueError):
        pearson([0.1], [0.2])


def test_density_single_sample_and_diagonal():
    d = density_map([0.4], [0.35], bins=10)
    assert d.sum() == 1 and np.count_nonzero(d) == 1
    v = np.linspace(0.05, 0.95, 10)
    d = density_map(v, v, bins=10)
    assert np.array_equal(d, np.eye(10, dtype=int))


def test_density_uniform_counts():
    rng = np.random.default_rng(3)
    n, bins = 10_000, 10
    conf = rng.uniform(size=n)
    conf[0] = 1.0  # pin the maximum so normalization is the identity
    d = density_map(conf, rng.uniform(size=n), bins)
    p = 1 / bins**2
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(d - n * p) <= 5 * sigma)


def test_density_errors():
    with pytest.raises(ValueError):
        density_map([], [], 10)
    with pytest.raises(ValueError):
        density_map([0.5], [0.5], 1)


def test_histograms_and_report():
    scene = _scene(GT)
    preds = PredictionSet([[0.9, 0], [0.7, 0], [0.5, 0], [0.2, 0]], LADDER)
    hc, br, edges = iou_histograms(preds, scene, bins=5)
    assert hc.sum() == 1 and br.sum() == 1 and len(edges) == 6
    rep = alignment_report([(preds, scene)], ms=(1, 2), bins=5)
    assert rep.br_recall_at == {1: 1.0, 2: 1.0}
    assert rep.pearson_r > 0.9
    assert rep.density.sum() == 4
