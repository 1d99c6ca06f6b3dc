"""Central finite-difference checks of the criterion's analytic gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .criterion import CriterionConfig, classification_loss, regression_loss, total_loss
from .structures import PredictionSet, Scene

LOGIT_STEP = 1e-5
BOX_STEP = 1e-6


@dataclass
class GradcheckReport:
    max_rel_err: float
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(analytic: float, numeric: float, floor: float = 1e-4) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    grad_fn: Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]],
    params: Mapping[str, np.ndarray],
    step: float | Mapping[str, float] = LOGIT_STEP,
    tol: float = 1e-4,
    floor: float = 1e-4,
) -> GradcheckReport:
    """Compare ``grad_fn`` with central differences of ``loss_fn``, element by element.

    Both take a dict of parameter arrays; ``grad_fn`` returns arrays keyed
    like ``params``. The relative error of an entry is taken against
    ``max(|analytic|, |numeric|, floor)`` so that entries far below the
    finite-difference noise are compared in absolute terms. Raises
    ``FloatingPointError`` on a non-finite probe.
    """
    base = {k: np.array(v, dtype=float) for k, v in params.items()}
    grads = grad_fn(base)
    worst_err, worst = 0.0, None
    n = 0
    for name, value in base.items():
        h = step[name] if isinstance(step, Mapping) else step
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + h
            f_plus = loss_fn(base)
            value[idx] = orig - h
            f_minus = loss_fn(base)
            value[idx] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite loss probing {name}{idx}")
            numeric = (f_plus - f_minus) / (2 * h)
            err = relative_error(float(grads[name][idx]), numeric, floor)
            n += 1
            if worst is None or err > worst_err:
                worst_err, worst = err, (name, idx)
    return GradcheckReport(worst_err, worst, n, tol)


def criterion_loss_fn(layer_logits, layer_boxes, gts: Scene, cfg: CriterionConfig):
    """``(loss_fn, grad_fn, params)`` over ``logits/<l>`` and ``boxes/<l>``.

    Matching and quality targets are frozen at the given point, which is
    what training differentiates: the assignment is piecewise constant and
    targets carry no gradient.
    """
    layers = [PredictionSet.from_logits(lg, bx) for lg, bx in zip(layer_logits, layer_boxes)]
    base = total_loss(layers, gts, cfg)
    frozen = [(lr.assignment, lr.targets) for lr in base.layers]
    n_layers = len(layers)
    cls_cache: list[tuple[np.ndarray, float] | None] = [None] * n_layers
    reg_cache: list[tuple[np.ndarray, float] | None] = [None] * n_layers

    def _preds(params, i):
        return PredictionSet.from_logits(params[f"logits/{i}"], params[f"boxes/{i}"])

    def loss_fn(params) -> float:
        # with matching and targets frozen the loss is a sum of per-layer
        # classification terms (logits only) and regression terms (boxes only);
        # a term is re-evaluated only when its own inputs changed
        values = []
        for i in range(n_layers):
            lg, bx = params[f"logits/{i}"], params[f"boxes/{i}"]
            assignment, targets = frozen[i]
            c, r = cls_cache[i], reg_cache[i]
            stale_c = c is None or not np.array_equal(c[0], lg)
            stale_r = r is None or not np.array_equal(r[0], bx)
            if stale_c or stale_r:
                preds = _preds(params, i)
            if stale_c:
                t = classification_loss(preds, assignment, gts, cfg, targets, with_grad=False)
                c = cls_cache[i] = (lg.copy(), cfg.loss_class * (t.cls_pos + t.cls_neg))
            if stale_r:
                t = regression_loss(
                    preds, assignment, gts, targets.weight, cfg.loss_bbox, cfg.loss_giou, with_grad=False
                )
                r = reg_cache[i] = (bx.copy(), cfg.loss_bbox * t.reg_l1 + cfg.loss_giou * t.reg_giou)
            values += [c[1], r[1]]
        return math.fsum(values)

    def grad_fn(params) -> dict[str, np.ndarray]:
        rep = total_loss([_preds(params, i) for i in range(n_layers)], gts, cfg, frozen=frozen)
        grads = {}
        for i, (gl, gb) in enumerate(rep.grads):
            grads[f"logits/{i}"] = gl
            grads[f"boxes/{i}"] = gb
        return grads

    params = {}
    for i in range(n_layers):
        params[f"logits/{i}"] = np.asarray(layer_logits[i], dtype=float)
        params[f"boxes/{i}"] = np.asarray(layer_boxes[i], dtype=float)
    return loss_fn, grad_fn, params


def check_criterion(layer_logits, layer_boxes, gts: Scene, cfg: CriterionConfig, tol: float = 1e-4) -> GradcheckReport:
    loss_fn, grad_fn, params = criterion_loss_fn(layer_logits, layer_boxes, gts, cfg)
    steps = {k: (LOGIT_STEP if k.startswith("logits") else BOX_STEP) for k in params}
    return gradcheck(loss_fn, grad_fn, params, steps, tol)


def random_problem(seed: int, n_pred: int = 10, n_gt: int = 3, n_classes: int = 5, n_layers: int = 2):
    """Random logits/boxes and scene for gradient checks.

    Predicted boxes are jittered copies of GT boxes so that overlaps are
    non-trivial; nothing is placed exactly on an L1 or min/max kink.
    """
    from .geometry import Box
    from .structures import GroundTruth

    rng = np.random.default_rng(seed)
    objects = []
    for _ in range(n_gt):
        cx, cy = rng.uniform(0.2, 0.8, 2)
        w, h = rng.uniform(0.1, 0.4, 2)
        objects.append(GroundTruth(int(rng.integers(n_classes)), Box(cx, cy, w, h)))
    scene = Scene(n_classes, tuple(objects))
    logits, boxes = [], []
    for _ in range(n_layers):
        logits.append(rng.normal(-1.0, 1.5, (n_pred, n_classes)))
        src = scene.boxes[rng.integers(n_gt, size=n_pred)]
        jitter = rng.normal(0, 0.05, (n_pred, 4))
        bx = src + jitter
        bx[:, 2:] = np.clip(bx[:, 2:], 0.05, None)
        boxes.append(bx)
    return logits, boxes, scene
