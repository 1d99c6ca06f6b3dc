"""
Desk-scale direct set prediction.

The learnable state is one bank of per-query class logits and raw box
parameters per decoder layer; boxes are ``sigmoid(raw)`` so they stay
valid without projection. Each step re-matches every layer, evaluates the
mixed criterion and takes an Adam step on the analytic gradients.
"""

from __future__ import annotations

import math
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .criterion import CriterionConfig, total_loss
from .diagnostics import AlignmentReport, UndefinedCorrelation, alignment_report, pearson
from .geometry import Box, pairwise_iou
from .structures import GroundTruth, PredictionSet, Scene, sigmoid

THREADS_ENV = "ALIGN_CRITERION_THREADS"


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class SceneBudgetExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    n_gt: int = 3
    n_classes: int = 5
    cxcy_range: tuple[float, float] = (0.15, 0.85)
    wh_range: tuple[float, float] = (0.1, 0.4)
    max_iou: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n_gt <= 8:
            raise ValueError("n_gt must lie in [1, 8]")
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")


def generate_scene(spec: SceneSpec, max_tries: int = 1000) -> Scene:
    """Random scene, deterministic in ``spec.seed``.

    A box reaching outside the unit square or overlapping an accepted one
    with IoU above ``spec.max_iou`` is redrawn; ``max_tries`` bounds the
    total number of draws.
    """
    rng = np.random.default_rng(spec.seed)
    lo_c, hi_c = spec.cxcy_range
    lo_s, hi_s = spec.wh_range
    boxes: list[np.ndarray] = []
    tries = 0
    while len(boxes) < spec.n_gt:
        if tries >= max_tries:
            raise SceneBudgetExhausted(f"could not place {spec.n_gt} boxes in {max_tries} draws")
        tries += 1
        cand = np.concatenate([rng.uniform(lo_c, hi_c, 2), rng.uniform(lo_s, hi_s, 2)])
        half = cand[2:] / 2
        if np.any(cand[:2] - half < 0) or np.any(cand[:2] + half > 1):
            continue
        if boxes and pairwise_iou(cand, np.array(boxes)).max() > spec.max_iou:
            continue
        boxes.append(cand)
    classes = rng.integers(spec.n_classes, size=spec.n_gt)
    objects = tuple(GroundTruth(int(c), Box.from_seq(b)) for c, b in zip(classes, boxes))
    return Scene(spec.n_classes, objects)


@dataclass(frozen=True)
class TrainConfig:
    n_queries: int = 20
    n_layers: int = 3
    steps: int = 2000
    lr_logits: float = 0.05
    lr_boxes: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    logit_init_mean: float = -2.0
    logit_init_std: float = 0.1
    box_init_std: float = 0.5
    criterion: CriterionConfig = CriterionConfig()
    seed: int = 0

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class StepRecord:
    total: float
    cls_pos: float
    cls_neg: float
    reg_l1: float
    reg_giou: float
    pearson: float
    br_recall_1: float
    br_recall_2: float


@dataclass
class TrainTrace:
    """``records[i]`` is evaluated before update ``i``; ``final`` after the last one."""

    records: list[StepRecord]
    final: StepRecord
    final_report: AlignmentReport
    final_layers: list[PredictionSet] = field(repr=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> list[float]:
        return [r.total for r in self.records]


class Adam:
    def __init__(self, shapes, lrs, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.lrs = lrs
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, g, m, v, lr in zip(params, grads, self.m, self.v, self.lrs):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _last_layer_metrics(preds: PredictionSet, scene: Scene) -> tuple[float, float, float]:
    ious = pairwise_iou(preds.boxes, scene.boxes)
    conf = preds.confidence
    try:
        r = pearson(conf, ious.max(axis=1))
    except UndefinedCorrelation:
        r = float("nan")
    br = np.argmax(ious, axis=0)
    order = np.argsort(-conf, kind="stable")
    n = len(scene)
    hc1, hc2 = set(order[:n].tolist()), set(order[: 2 * n].tolist())
    return r, sum(b in hc1 for b in br) / n, sum(b in hc2 for b in br) / n


def _evaluate(logits, raw, scene: Scene, cfg: TrainConfig):
    layers = [PredictionSet.from_logits(lg, sigmoid(rb)) for lg, rb in zip(logits, raw)]
    report = total_loss(layers, scene, cfg.criterion)
    terms = report.term_sums()
    r, br1, br2 = _last_layer_metrics(layers[-1], scene)
    rec = StepRecord(report.total, terms["cls_pos"], terms["cls_neg"], terms["reg_l1"], terms["reg_giou"], r, br1, br2)
    return layers, report, rec


def train_scene(scene: Scene, cfg: TrainConfig) -> TrainTrace:
    """Optimize the query banks for one scene; deterministic in ``cfg.seed``."""
    k = cfg.criterion.k
    if cfg.n_layers > 1 and k * len(scene) > cfg.n_queries:
        from .matching import InfeasibleReplication

        raise InfeasibleReplication(f"{cfg.n_queries} queries cannot host {k} x {len(scene)} targets")
    rng = np.random.default_rng(cfg.seed)
    shape_l = (cfg.n_queries, scene.n_classes)
    logits, raw = [], []
    for _ in range(cfg.n_layers):
        logits.append(rng.normal(cfg.logit_init_mean, cfg.logit_init_std, shape_l))
        raw.append(rng.normal(0.0, cfg.box_init_std, (cfg.n_queries, 4)))
    params = logits + raw
    opt = Adam(
        [p.shape for p in params],
        [cfg.lr_logits] * cfg.n_layers + [cfg.lr_boxes] * cfg.n_layers,
        cfg.beta1,
        cfg.beta2,
        cfg.adam_eps,
    )
    records = []
    for step in range(cfg.steps):
        layers, report, rec = _evaluate(logits, raw, scene, cfg)
        if not math.isfinite(rec.total):
            raise TrainingDiverged(step)
        records.append(rec)
        g_logits, g_raw = [], []
        for lyr, (gl, gb) in zip(layers, report.grads):
            b = lyr.boxes
            g_logits.append(gl)
            g_raw.append(gb * b * (1 - b))
        opt.step(params, g_logits + g_raw)
    layers, _, final = _evaluate(logits, raw, scene, cfg)
    if not math.isfinite(final.total):
        raise TrainingDiverged(cfg.steps)
    report = alignment_report([(layers[-1], scene)], ms=(1, 2, 3))
    return TrainTrace(records, final, report, layers)


def _train_job(args):
    scene, cfg = args
    return train_scene(scene, cfg)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def run_jobs(jobs, workers: int | None = None) -> list[TrainTrace]:
    """Train ``(scene, cfg)`` jobs; results keep job order regardless of workers."""
    workers = _workers() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_train_job, jobs))


def train(scenes, cfg: TrainConfig) -> list[TrainTrace]:
    """One independent run per scene, seeded ``cfg.seed + index``."""
    return run_jobs([(s, cfg.with_(seed=cfg.seed + i)) for i, s in enumerate(scenes)])


def steps_to_threshold(losses, best: float, factor: float = 1.25) -> int | None:
    """First step with loss <= ``factor * best``; ``None`` if never reached."""
    limit = factor * best
    for i, v in enumerate(losses):
        if v <= limit:
            return i
    return None


@dataclass
class ArmSummary:
    name: str
    final_loss: list[float]
    pearson: list[float]
    br_recall: list[float]
    steps_to_threshold: list[int | None]

    @staticmethod
    def _mean_sem(xs):
        xs = [x for x in xs if not math.isnan(x)]
        if not xs:
            return float("nan"), float("nan")
        mean = math.fsum(xs) / len(xs)
        sem = statistics.stdev(xs) / math.sqrt(len(xs)) if len(xs) > 1 else 0.0
        return mean, sem

    def stats(self) -> dict:
        fl = self._mean_sem(self.final_loss)
        pr = self._mean_sem(self.pearson)
        br = self._mean_sem(self.br_recall)
        reached = [s if s is not None else math.inf for s in self.steps_to_threshold]
        med = statistics.median(reached) if reached else math.nan
        return {
            "arm": self.name,
            "final_loss_mean": fl[0],
            "final_loss_sem": fl[1],
            "pearson_mean": pr[0],
            "pearson_sem": pr[1],
            "br_recall_mean": br[0],
            "br_recall_sem": br[1],
            "steps_to_threshold_median": None if math.isinf(med) else med,
            "n_reached": sum(s is not None for s in self.steps_to_threshold),
            "n_runs": len(self.final_loss),
        }


@dataclass
class Comparison:
    arms: dict[str, ArmSummary]
    traces: dict[str, list[TrainTrace]] = field(repr=False)

    def table(self) -> list[dict]:
        return [a.stats() for a in self.arms.values()]

    def threshold_steps(self, names, factor: float = 1.25) -> dict[str, list[int | None]]:
        """Steps-to-threshold with the per-scene best taken over ``names`` only."""
        runs = {n: [t.losses + [t.final.total] for t in self.traces[n]] for n in names}
        n_scenes = len(next(iter(runs.values())))
        best = [min(min(r[i]) for r in runs.values()) for i in range(n_scenes)]
        return {n: [steps_to_threshold(r[i], best[i], factor) for i in range(n_scenes)] for n, r in runs.items()}


def compare_variants(scenes, base_cfg: TrainConfig, variants) -> Comparison:
    """Train every arm on the same scenes and seeds.

    ``variants`` maps arm name to a ``TrainConfig`` or to a dict of
    criterion overrides applied to ``base_cfg``. Steps-to-threshold per
    scene uses the best loss reached by any arm on that scene.
    """
    scenes = list(scenes)
    arm_cfgs = {}
    for name, v in dict(variants).items():
        if isinstance(v, TrainConfig):
            arm_cfgs[name] = v
        else:
            arm_cfgs[name] = base_cfg.with_(criterion=base_cfg.criterion.with_(**v))
    jobs, keys = [], []
    for name, cfg in arm_cfgs.items():
        for i, s in enumerate(scenes):
            jobs.append((s, cfg.with_(seed=base_cfg.seed + i)))
            keys.append(name)
    results = run_jobs(jobs)
    traces: dict[str, list[TrainTrace]] = {name: [] for name in arm_cfgs}
    for name, tr in zip(keys, results):
        traces[name].append(tr)
    cmp = Comparison({}, traces)
    steps = cmp.threshold_steps(list(traces)) if scenes else {n: [] for n in traces}
    for name, trs in traces.items():
        cmp.arms[name] = ArmSummary(
            name,
            [t.final.total for t in trs],
            [t.final.pearson for t in trs],
            [t.final.br_recall_1 for t in trs],
            steps[name],
        )
    return cmp
