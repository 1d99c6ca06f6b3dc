"""
Pair-wise matching cost and exact bipartite assignment.

The cost of pairing prediction ``i`` with ground truth ``j`` combines a
focal-style classification cost on the predicted probability of the GT
class, the L1 distance of the center-format boxes and ``1 - GIoU``.
``hungarian`` solves the rectangular assignment exactly with the
shortest-augmenting-path form of the Hungarian method;
``brute_force_match`` enumerates every injective map and exists as a
test oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import pairwise_giou
from .structures import PredictionSet, Scene

EPS = 1e-8
BRUTE_FORCE_MAX = 8


class InfeasibleReplication(ValueError):
    """Raised when ``k * n_gt`` replicated targets exceed the prediction count."""


@dataclass(frozen=True)
class CostParams:
    lambda_class: float = 2.0
    lambda_bbox: float = 5.0
    lambda_giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        weights = (self.lambda_class, self.lambda_bbox, self.lambda_giou)
        if min(weights) < 0 or max(weights) <= 0:
            raise ValueError("cost weights must be >= 0 with at least one > 0")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")


@dataclass
class Assignment:
    """Matched ``(prediction, gt)`` pairs plus unmatched prediction indices.

    ``replicas[i]`` is the copy index of the GT in ``pairs[i]`` when the GT
    set was replicated (always 0 for one-to-one matching).
    """

    pairs: list[tuple[int, int]]
    unmatched: list[int]
    total_cost: float = 0.0
    replicas: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.replicas:
            self.replicas = [0] * len(self.pairs)

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=int)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=int)

    def gt_counts(self, n_gt: int) -> list[int]:
        counts = [0] * n_gt
        for _, g in self.pairs:
            counts[g] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "pairs": [[p, g] for p, g in self.pairs],
            "replicas": list(self.replicas),
            "unmatched": list(self.unmatched),
            "total_cost": self.total_cost,
        }


def _assignment_from_pairs(cost: np.ndarray, pairs) -> Assignment:
    pairs = sorted((int(p), int(g)) for p, g in pairs)
    taken = {p for p, _ in pairs}
    unmatched = [i for i in range(cost.shape[0]) if i not in taken]
    total = math.fsum(cost[p, g] for p, g in pairs)
    return Assignment(pairs, unmatched, total)


def _check_cost(cost) -> np.ndarray:
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a 2-D matrix, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    return cost


def focal_class_cost(prob) -> np.ndarray:
    """Focal-style classification cost on probabilities (default constants)."""
    return _focal_class_cost(np.asarray(prob, dtype=float), CostParams())


def _focal_class_cost(prob: np.ndarray, params: CostParams) -> np.ndarray:
    s = np.clip(prob, EPS, 1 - EPS)
    a, g = params.focal_alpha, params.focal_gamma
    pos = a * (1 - s) ** g * -np.log(s + EPS)
    neg = (1 - a) * s**g * -np.log(1 - s + EPS)
    return pos - neg


def cost_matrix(preds: PredictionSet, gts: Scene, params: CostParams = CostParams()) -> np.ndarray:
    """Matching cost ``[n_pred, n_gt]``."""
    if len(preds) < 1 or len(gts) < 1:
        raise ValueError("cost_matrix needs at least one prediction and one GT")
    scores = preds.scores
    if np.any(scores <= 0) or np.any(scores >= 1) or not np.all(np.isfinite(scores)):
        raise ValueError("prediction probabilities must lie strictly inside (0, 1)")
    labels, gt_boxes = gts.labels, gts.boxes
    c_cls = _focal_class_cost(scores[:, labels], params)
    c_l1 = np.abs(preds.boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=-1)
    c_giou = 1.0 - pairwise_giou(preds.boxes, gt_boxes)
    return params.lambda_class * c_cls + params.lambda_bbox * c_l1 + params.lambda_giou * c_giou


def _hungarian_rows(cost: list[list[float]], n: int, m: int) -> list[int]:
    """Assign each of ``n`` rows to a distinct column (``n <= m``).

    Returns ``col_of_row``. Potentials-based shortest augmenting path,
    O(n^2 m); indices are 1-based internally with 0 as the virtual root.
    """
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    row_of_col = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            crow = cost[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = crow[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[row_of_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = [-1] * n
    for j in range(1, m + 1):
        if row_of_col[j]:
            col_of_row[row_of_col[j] - 1] = j - 1
    return col_of_row


def hungarian(cost) -> Assignment:
    """Minimum-cost assignment of a ``[n_pred, n_gt]`` cost matrix.

    Either orientation is accepted; ``min(n_pred, n_gt)`` pairs are
    returned. The result is deterministic for a fixed input.
    """
    cost = _check_cost(cost)
    n_pred, n_gt = cost.shape
    if n_pred == 0 or n_gt == 0:
        return Assignment([], list(range(n_pred)), 0.0)
    if n_gt <= n_pred:
        cols = _hungarian_rows(cost.T.tolist(), n_gt, n_pred)
        pairs = [(p, g) for g, p in enumerate(cols)]
    else:
        cols = _hungarian_rows(cost.tolist(), n_pred, n_gt)
        pairs = list(enumerate(cols))
    return _assignment_from_pairs(cost, pairs)


def brute_force_match(cost) -> Assignment:
    """Exhaustive minimum over all injective assignments (test oracle)."""
    cost = _check_cost(cost)
    n_pred, n_gt = cost.shape
    small = min(n_pred, n_gt)
    if small > BRUTE_FORCE_MAX:
        raise ValueError(f"brute force limited to min dimension <= {BRUTE_FORCE_MAX}")
    if small == 0:
        return Assignment([], list(range(n_pred)), 0.0)
    transposed = n_gt > n_pred
    mat = cost if not transposed else cost.T
    # rows of mat are the larger side; choose an ordered subset of rows for the columns
    perms = np.array(list(itertools.permutations(range(mat.shape[0]), small)), dtype=int)
    totals = mat[perms, np.arange(small)].sum(axis=1)
    best = perms[int(np.argmin(totals))]
    if transposed:
        pairs = [(j, int(r)) for j, r in enumerate(best)]
    else:
        pairs = [(int(r), j) for j, r in enumerate(best)]
    return _assignment_from_pairs(cost, pairs)


def match_one_to_one(preds: PredictionSet, gts: Scene, params: CostParams = CostParams()) -> Assignment:
    if len(gts) == 0:
        return Assignment([], list(range(len(preds))), 0.0)
    return hungarian(cost_matrix(preds, gts, params))


def replicate_cost(cost: np.ndarray, k: int) -> np.ndarray:
    """Columns ``r * n_gt + j`` hold copy ``r`` of GT ``j``."""
    return np.tile(cost, (1, k))


def match_many_to_one(
    preds: PredictionSet, gts: Scene, params: CostParams = CostParams(), k: int = 3
) -> Assignment:
    """Hungarian matching against the GT set replicated ``k`` times.

    GT indices in the result are original ids; the copy index of each pair
    is kept in ``replicas``.
    """
    if k < 1:
        raise ValueError("k must be a positive integer")
    n_gt = len(gts)
    if k * n_gt > len(preds):
        raise InfeasibleReplication(
            f"cannot replicate {n_gt} GTs {k} times with {len(preds)} predictions"
        )
    if n_gt == 0:
        return Assignment([], list(range(len(preds))), 0.0)
    cost = cost_matrix(preds, gts, params)
    rep = hungarian(replicate_cost(cost, k))
    pairs = [(p, g % n_gt) for p, g in rep.pairs]
    replicas = [g // n_gt for _, g in rep.pairs]
    return Assignment(pairs, rep.unmatched, rep.total_cost, replicas)
