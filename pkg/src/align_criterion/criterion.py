"""
IoU-aware classification loss, prime sample weighting and the mixed
one-to-one / many-to-one multi-layer criterion.

Every loss here is evaluated together with its analytic gradient with
respect to the class logits and the center-format box coordinates of each
layer. Quality targets, ranks and prime weights are constants for
differentiation: they are computed once from the current predictions and
never differentiated through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import paired_giou_with_grad
from .matching import Assignment, CostParams, match_many_to_one, match_one_to_one
from .structures import PredictionSet, Scene

EPS = 1e-8

# Table-A style foreground forms: name -> (w_pos, w_neg) as text, for reporting
TABLE_A_FORMS = {
    "ce": ("1", "0"),
    "t": ("t", "0"),
    "sq": ("(t-s)^2", "(t-s)^2"),
    "sq-s2": ("(t-s)^2", "(1-t)*s^2"),
    "iabce": ("t", "1-t"),
}
VARIANT_KINDS = ("ia_bce", "focal", "qfl", "vfl", "table_a")


@dataclass(frozen=True)
class Variant:
    """Classification loss form.

    ``kind`` is one of ``ia_bce``, ``focal``, ``qfl`` (``gamma`` is the
    modulating exponent), ``vfl`` or ``table_a`` (``form`` names the
    foreground weighting, see ``TABLE_A_FORMS``).
    """

    kind: str = "ia_bce"
    gamma: float | None = None
    form: str | None = None

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant {self.kind!r}")
        if self.kind == "qfl" and (self.gamma is None or self.gamma < 0):
            raise ValueError("qfl needs a non-negative gamma")
        if self.kind == "table_a" and self.form not in TABLE_A_FORMS:
            raise ValueError(f"unknown table_a form {self.form!r}; choose from {sorted(TABLE_A_FORMS)}")

    @property
    def name(self) -> str:
        if self.kind == "qfl":
            return f"qfl:{self.gamma:g}"
        if self.kind == "table_a":
            return f"table_a:{self.form}"
        return self.kind

    @classmethod
    def parse(cls, text: str) -> "Variant":
        """Parse ``ia_bce``, ``focal``, ``vfl``, ``qfl:<gamma>`` or ``table_a:<form>``."""
        text = text.strip().lower().replace("-bce", "_bce")
        kind, _, arg = text.partition(":")
        if kind == "qfl":
            return cls("qfl", gamma=float(arg) if arg else 2.0)
        if kind == "table_a":
            return cls("table_a", form=arg)
        if arg:
            raise ValueError(f"variant {kind!r} takes no argument")
        return cls(kind)


ALL_VARIANTS = (
    Variant("ia_bce"),
    Variant("focal"),
    Variant("qfl", gamma=2.0),
    Variant("qfl", gamma=1.0),
    Variant("vfl"),
    *(Variant("table_a", form=f) for f in TABLE_A_FORMS),
)


@dataclass(frozen=True)
class CriterionConfig:
    alpha: float = 0.25
    tau: float = 1.5
    k: int = 3
    gamma: float = 2.0
    loss_class: float = 1.0
    loss_bbox: float = 5.0
    loss_giou: float = 2.0
    variant: Variant = Variant()
    prime_weighting: bool = True
    focal_alpha: float = 0.25
    cost: CostParams = CostParams()

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", Variant.parse(self.variant))

    def with_(self, **changes) -> "CriterionConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# quality target and prime weights
# ---------------------------------------------------------------------------


def quality(s, u, alpha: float):
    """Weighted geometric mean ``s**alpha * u**(1 - alpha)`` of score and IoU."""
    s = np.clip(np.asarray(s, dtype=float), EPS, 1 - EPS)
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    t = s**alpha * u ** (1 - alpha)
    return float(t) if t.ndim == 0 else t


def group_ranks(values, groups=None) -> np.ndarray:
    """Rank of each value within its group, 0 = largest; ties go to the lower index."""
    values = np.asarray(values, dtype=float)
    groups = np.zeros(len(values), dtype=int) if groups is None else np.asarray(groups)
    ranks = np.zeros(len(values), dtype=int)
    for g in np.unique(groups):
        idx = np.flatnonzero(groups == g)
        order = idx[np.argsort(-values[idx], kind="stable")]
        ranks[order] = np.arange(len(order))
    return ranks


def prime_weights(ts, tau: float) -> list[float]:
    """``exp(-rank / tau)`` for one GT group, in input order."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    ranks = group_ranks(ts)
    return [math.exp(-r / tau) for r in ranks]


@dataclass
class QualityTargets:
    """Per matched pair: IoU, quality, variant target, rank and prime weight."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray
    classes: np.ndarray
    iou: np.ndarray
    quality: np.ndarray
    target: np.ndarray
    rank: np.ndarray
    weight: np.ndarray

    @property
    def effective(self) -> np.ndarray:
        return self.weight * self.target


def quality_targets(preds: PredictionSet, assignment: Assignment, gts: Scene, cfg: CriterionConfig) -> QualityTargets:
    pred_idx, gt_idx = assignment.pred_indices, assignment.gt_indices
    classes = gts.labels[gt_idx] if len(gt_idx) else np.zeros(0, dtype=int)
    if len(pred_idx):
        ious, _, _ = paired_giou_with_grad(preds.boxes[pred_idx], gts.boxes[gt_idx], with_grad=False)
        s = preds.scores[pred_idx, classes]
    else:
        ious = s = np.zeros(0)
    q = np.asarray(quality(s, ious, cfg.alpha), dtype=float).reshape(-1)
    kind = cfg.variant.kind
    target = np.clip(ious, 0.0, 1.0) if kind in ("qfl", "vfl") else q
    if np.any(target < 0) or np.any(target > 1):
        raise ValueError("quality target outside [0, 1]")
    # hard-target focal has no quality target: rank by IoU, leave samples unweighted
    rank = group_ranks(ious if kind == "focal" else target, gt_idx)
    if cfg.prime_weighting and kind != "focal":
        weight = np.exp(-rank / cfg.tau)
    else:
        weight = np.ones(len(rank))
    return QualityTargets(pred_idx, gt_idx, classes, ious, q, target, rank, weight)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


@dataclass
class LossTerms:
    """Per-layer loss contributions (already divided by the GT count) and gradients."""

    cls_pos: float = 0.0
    cls_neg: float = 0.0
    reg_l1: float = 0.0
    reg_giou: float = 0.0
    grad_logits: np.ndarray | None = None
    grad_boxes: np.ndarray | None = None

    def __add__(self, other: "LossTerms") -> "LossTerms":
        def _sum(a, b):
            if a is None:
                return b
            return a if b is None else a + b

        return LossTerms(
            self.cls_pos + other.cls_pos,
            self.cls_neg + other.cls_neg,
            self.reg_l1 + other.reg_l1,
            self.reg_giou + other.reg_giou,
            _sum(self.grad_logits, other.grad_logits),
            _sum(self.grad_boxes, other.grad_boxes),
        )


def _foreground_weights(variant: Variant, s, t, focal_alpha: float, gamma: float):
    """``(w_pos, w_neg, dw_pos/ds, dw_neg/ds)`` for the positive cells."""
    zero = np.zeros_like(s)
    kind = variant.kind
    if kind == "ia_bce" or (kind == "table_a" and variant.form == "iabce"):
        return t, 1 - t, zero, zero
    if kind == "focal":
        a = focal_alpha * (1 - s) ** gamma
        da = -focal_alpha * gamma * (1 - s) ** (gamma - 1) if gamma > 0 else zero
        return a, zero, da, zero
    if kind == "qfl":
        g = variant.gamma
        d = s - t
        mod = np.abs(d) ** g
        dmod = g * np.abs(d) ** (g - 1) * np.sign(d) if g > 0 else zero
        return mod * t, mod * (1 - t), dmod * t, dmod * (1 - t)
    if kind == "vfl":
        return t * t, t * (1 - t), zero, zero
    form = variant.form
    if form == "ce":
        return np.ones_like(s), zero, zero, zero
    if form == "t":
        return t, zero, zero, zero
    d = t - s
    if form == "sq":
        return d * d, d * d, -2 * d, -2 * d
    if form == "sq-s2":
        return d * d, (1 - t) * s * s, -2 * d, 2 * (1 - t) * s
    raise ValueError(f"unknown variant {variant.name}")


def _weighted_bce(s, w_pos, w_neg, dw_pos, dw_neg, with_grad=True):
    """Loss ``-w_pos log s - w_neg log(1-s)`` and its derivative w.r.t. the logit."""
    log_s, log_1s = np.log(s), np.log1p(-s)
    loss = -w_pos * log_s - w_neg * log_1s
    if not with_grad:
        return loss, None
    ds = s * (1 - s)
    dlogit = -dw_pos * log_s * ds - w_pos * (1 - s) - dw_neg * log_1s * ds + w_neg * s
    return loss, dlogit


def classification_loss(
    preds: PredictionSet,
    assignment: Assignment,
    gts: Scene,
    cfg: CriterionConfig,
    targets: QualityTargets | None = None,
    variant: Variant | None = None,
    with_grad: bool = True,
) -> LossTerms:
    """Soft-target BCE on matched cells, focal-weighted BCE on every other cell.

    Divided by ``max(n_gt, 1)``; ``grad_logits`` is ``[n, C]`` (``None``
    unless ``with_grad``).
    """
    variant = variant or cfg.variant
    if variant != cfg.variant:
        cfg = cfg.with_(variant=variant)
    if targets is None:
        targets = quality_targets(preds, assignment, gts, cfg)
    if np.any(targets.target < 0) or np.any(targets.target > 1):
        raise ValueError("quality target outside [0, 1]")
    n_norm = max(len(gts), 1)
    s = np.clip(preds.scores, EPS, 1 - EPS)

    if variant.kind == "qfl":
        bg_gamma, bg_scale = variant.gamma, 1.0
    elif variant.kind == "focal":
        bg_gamma, bg_scale = cfg.gamma, 1 - cfg.focal_alpha
    else:
        bg_gamma, bg_scale = cfg.gamma, 1.0
    w_bg = bg_scale * s**bg_gamma
    if with_grad and bg_gamma > 0:
        dw_bg = bg_scale * bg_gamma * s ** (bg_gamma - 1)
    else:
        dw_bg = 0.0
    loss, grad = _weighted_bce(s, 0.0, w_bg, 0.0, dw_bg, with_grad)

    pi, ci = targets.pred_idx, targets.classes
    pos_loss = 0.0
    bg = loss.copy()
    bg[pi, ci] = 0.0
    neg_loss = math.fsum(bg.ravel().tolist())
    if len(pi):
        sp = s[pi, ci]
        wp, wn, dwp, dwn = _foreground_weights(
            variant, sp, targets.effective, cfg.focal_alpha, cfg.gamma
        )
        lp, gp = _weighted_bce(sp, wp, wn, dwp, dwn, with_grad)
        # each prediction appears in at most one pair, so fancy assignment is safe
        loss[pi, ci] = lp
        if with_grad:
            grad[pi, ci] = gp
        pos_loss = math.fsum(lp.tolist())
    return LossTerms(
        cls_pos=pos_loss / n_norm,
        cls_neg=neg_loss / n_norm,
        grad_logits=grad / n_norm if with_grad else None,
        grad_boxes=np.zeros_like(preds.boxes) if with_grad else None,
    )


def ia_bce_loss(preds, assignment, gts, cfg: CriterionConfig, targets=None) -> LossTerms:
    return classification_loss(preds, assignment, gts, cfg, targets, variant=Variant("ia_bce"))


def comparison_loss(preds, assignment, gts, variant, cfg: CriterionConfig | None = None, targets=None) -> LossTerms:
    if isinstance(variant, str):
        variant = Variant.parse(variant)
    cfg = (cfg or CriterionConfig()).with_(variant=variant)
    return classification_loss(preds, assignment, gts, cfg, targets)


def regression_loss(
    preds: PredictionSet,
    assignment: Assignment,
    gts: Scene,
    weights=None,
    loss_bbox: float = 5.0,
    loss_giou: float = 2.0,
    with_grad: bool = True,
) -> LossTerms:
    """Prime-weighted L1 and ``1 - GIoU`` box losses over matched pairs.

    ``reg_l1``/``reg_giou`` are unscaled by the loss weights; the gradient
    is that of ``loss_bbox * reg_l1 + loss_giou * reg_giou``.
    """
    n_norm = max(len(gts), 1)
    grad = np.zeros_like(preds.boxes) if with_grad else None
    grad_logits = np.zeros_like(preds.scores) if with_grad else None
    pi, gi = assignment.pred_indices, assignment.gt_indices
    if len(pi) == 0:
        return LossTerms(grad_logits=grad_logits, grad_boxes=grad)
    w = np.ones(len(pi)) if weights is None else np.asarray(weights, dtype=float)
    pb, gb = preds.boxes[pi], gts.boxes[gi]
    diff = pb - gb
    l1 = np.abs(diff).sum(axis=1)
    _, gious, dgiou = paired_giou_with_grad(pb, gb, with_grad)
    if with_grad:
        grad[pi] = w[:, None] * (loss_bbox * np.sign(diff) - loss_giou * dgiou) / n_norm
    return LossTerms(
        reg_l1=math.fsum((w * l1).tolist()) / n_norm,
        reg_giou=math.fsum((w * (1 - gious)).tolist()) / n_norm,
        grad_logits=grad_logits,
        grad_boxes=grad,
    )


# ---------------------------------------------------------------------------
# multi-layer criterion
# ---------------------------------------------------------------------------


@dataclass
class LayerReport:
    terms: LossTerms
    assignment: Assignment
    targets: QualityTargets
    one_to_one: bool

    def weighted_total(self, cfg: CriterionConfig) -> float:
        t = self.terms
        return (
            cfg.loss_class * (t.cls_pos + t.cls_neg)
            + cfg.loss_bbox * t.reg_l1
            + cfg.loss_giou * t.reg_giou
        )


@dataclass
class LossReport:
    total: float
    layers: list[LayerReport] = field(default_factory=list)

    @property
    def grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per layer ``(d total / d logits, d total / d boxes)``."""
        return [(lr.terms.grad_logits, lr.terms.grad_boxes) for lr in self.layers]

    def term_sums(self) -> dict[str, float]:
        keys = ("cls_pos", "cls_neg", "reg_l1", "reg_giou")
        return {k: math.fsum(getattr(lr.terms, k) for lr in self.layers) for k in keys}

    def positive_counts(self, n_gt: int) -> list[int]:
        counts = [0] * n_gt
        for lr in self.layers:
            for g, c in enumerate(lr.assignment.gt_counts(n_gt)):
                counts[g] += c
        return counts

    def to_dict(self) -> dict:
        layers = []
        for i, lr in enumerate(self.layers):
            t = lr.terms
            layers.append(
                {
                    "layer": i,
                    "matching": "one_to_one" if lr.one_to_one else "many_to_one",
                    "cls_pos": t.cls_pos,
                    "cls_neg": t.cls_neg,
                    "reg_l1": t.reg_l1,
                    "reg_giou": t.reg_giou,
                    "pairs": [[p, g] for p, g in lr.assignment.pairs],
                    "iou": lr.targets.iou.tolist(),
                    "quality": lr.targets.quality.tolist(),
                    "rank": lr.targets.rank.tolist(),
                    "weight": lr.targets.weight.tolist(),
                }
            )
        return {"total": self.total, **self.term_sums(), "layers": layers}


def layer_loss(
    preds: PredictionSet,
    gts: Scene,
    cfg: CriterionConfig,
    one_to_one: bool,
    frozen: tuple[Assignment, QualityTargets] | None = None,
    with_grad: bool = True,
) -> LayerReport:
    """Match (unless ``frozen``), build targets and evaluate one layer's loss."""
    if frozen is None:
        if one_to_one:
            assignment = match_one_to_one(preds, gts, cfg.cost)
        else:
            assignment = match_many_to_one(preds, gts, cfg.cost, cfg.k)
        targets = quality_targets(preds, assignment, gts, cfg)
    else:
        assignment, targets = frozen
    cls = classification_loss(preds, assignment, gts, cfg, targets, with_grad=with_grad)
    reg = regression_loss(
        preds, assignment, gts, targets.weight, cfg.loss_bbox, cfg.loss_giou, with_grad
    )
    terms = LossTerms(
        cls.cls_pos,
        cls.cls_neg,
        reg.reg_l1,
        reg.reg_giou,
        cfg.loss_class * cls.grad_logits if with_grad else None,
        reg.grad_boxes,
    )
    return LayerReport(terms, assignment, targets, one_to_one)


def total_loss(
    layer_preds: list[PredictionSet],
    gts: Scene,
    cfg: CriterionConfig = CriterionConfig(),
    frozen: list[tuple[Assignment, QualityTargets]] | None = None,
    with_grad: bool = True,
) -> LossReport:
    """Many-to-one loss on every layer but the last, one-to-one on the last."""
    n_layers = len(layer_preds)
    if n_layers < 1:
        raise ValueError("need at least one layer")
    layers = []
    for i, preds in enumerate(layer_preds):
        one_to_one = i == n_layers - 1
        fz = None if frozen is None else frozen[i]
        layers.append(layer_loss(preds, gts, cfg, one_to_one, fz, with_grad))
    total = math.fsum(lr.weighted_total(cfg) for lr in layers)
    return LossReport(total, layers)
