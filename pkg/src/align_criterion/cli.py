"""Command-line front end: ``align-criterion <command> ...``.

Exit codes: 0 success, 1 failed check (gradcheck), 2 unreadable or invalid
input, 3 infeasible replication factor. Output formats are described in
FORMATS.md.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import io
from .criterion import ALL_VARIANTS, CriterionConfig, Variant, total_loss
from .diagnostics import alignment_report
from .gradcheck import check_criterion, random_problem
from .matching import (
    BRUTE_FORCE_MAX,
    Assignment,
    InfeasibleReplication,
    brute_force_match,
    cost_matrix,
    match_many_to_one,
    replicate_cost,
)
from .toytrain import SceneSpec, TrainConfig, compare_variants, generate_scene

EXIT_FAIL = 1
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3

TRACE_COLUMNS = [
    "scene", "step", "total", "cls_pos", "cls_neg", "reg_l1", "reg_giou",
    "pearson", "br_recall_1", "br_recall_2",
]
SUMMARY_COLUMNS = [
    "arm", "final_loss_mean", "final_loss_sem", "pearson_mean", "pearson_sem",
    "br_recall_mean", "br_recall_sem", "steps_to_threshold_median", "n_reached", "n_runs",
]
GRADCHECK_COLUMNS = ["variant", "seed", "max_rel_err", "n_checked", "passed"]

TRAIN_EPILOG = f"""\
outputs in the output directory:
  trace_<arm>.csv  columns: {", ".join(TRACE_COLUMNS)}
                   one row per step per scene; step == steps is the state
                   after the last update
  summary.csv      columns: {", ".join(SUMMARY_COLUMNS)}
  summary.json     the same table plus the resolved config
"""

DIAGNOSE_EPILOG = """\
outputs in --out:
  recall.csv      columns: m, br_recall
  density.csv     columns: conf_lo, conf_hi, iou_lo, iou_hi, count
  histograms.csv  columns: iou_lo, iou_hi, hc_count, br_count
  summary.json    recall-vs-m and pearson_r
"""


def _emit(obj) -> None:
    sys.stdout.write(io.dumps(obj))


def _load_inputs(args):
    scene = io.load_scene(args.scene)
    layers = io.load_predictions(args.preds, scene.n_classes)
    return scene, layers


def _layer(layers, index: int):
    try:
        return layers[index]
    except IndexError:
        raise io.FormatError(f"predictions have {len(layers)} layers, no layer {index}") from None


def cmd_match(args) -> int:
    scene, layers = _load_inputs(args)
    preds = _layer(layers, args.layer)
    if args.k * len(scene) > len(preds):
        raise InfeasibleReplication(f"cannot replicate {len(scene)} GTs {args.k} times with {len(preds)} predictions")
    if args.solver == "hungarian":
        a = match_many_to_one(preds, scene, k=args.k)
    else:
        if len(scene) == 0:
            a = match_many_to_one(preds, scene, k=args.k)
        else:
            cost = replicate_cost(cost_matrix(preds, scene), args.k)
            if min(cost.shape) > BRUTE_FORCE_MAX:
                raise io.FormatError(f"brute force is limited to min dimension {BRUTE_FORCE_MAX}")
            rep = brute_force_match(cost)
            n = len(scene)
            a = Assignment(
                [(p, g % n) for p, g in rep.pairs], rep.unmatched, rep.total_cost, [g // n for _, g in rep.pairs]
            )
    _emit({"solver": args.solver, "k": args.k, "layer": args.layer, **a.to_dict()})
    return 0


def _criterion_from_args(args) -> CriterionConfig:
    try:
        return CriterionConfig(
            alpha=args.alpha, tau=args.tau, k=args.k, variant=Variant.parse(args.variant),
            prime_weighting=not args.no_prime,
        )
    except ValueError as exc:
        raise io.FormatError(str(exc)) from exc


def cmd_loss(args) -> int:
    scene, layers = _load_inputs(args)
    cfg = _criterion_from_args(args)
    report = total_loss(layers, scene, cfg, with_grad=False)
    _emit({"variant": cfg.variant.name, "alpha": cfg.alpha, "tau": cfg.tau, "k": cfg.k, **report.to_dict()})
    return 0


def cmd_gradcheck(args) -> int:
    if args.variant == ["all"] or not args.variant:
        variants = list(ALL_VARIANTS)
    else:
        try:
            variants = [Variant.parse(v) for v in args.variant]
        except ValueError as exc:
            raise io.FormatError(str(exc)) from exc
    rows, ok = [], True
    for v in variants:
        cfg = CriterionConfig(variant=v, k=args.k)
        for seed in range(args.seed, args.seed + args.seeds):
            logits, boxes, scene = random_problem(seed)
            rep = check_criterion(logits, boxes, scene, cfg, args.tol)
            ok &= rep.passed
            rows.append([v.name, seed, rep.max_rel_err, rep.n_checked, int(rep.passed)])
    sys.stdout.write(",".join(GRADCHECK_COLUMNS) + "\n")
    for r in rows:
        sys.stdout.write(",".join(io.format_cell(c) for c in r) + "\n")
    return 0 if ok else EXIT_FAIL


def _experiment(args):
    data = io.validate_experiment(io.read_json(args.config))
    sc = dict(data.get("scene", {}))
    tr = dict(data.get("train", {}))
    if args.seed is not None:
        sc["seed"] = args.seed
        tr["seed"] = args.seed
    n_scenes = sc.pop("n_scenes", 20)
    n_gt = sc.pop("n_gt", 3)
    n_gt = n_gt if isinstance(n_gt, list) else [n_gt]
    base_seed = sc.pop("seed", 0)
    try:
        scenes = [
            generate_scene(SceneSpec(n_gt=n_gt[i % len(n_gt)], seed=base_seed + i, **sc)) for i in range(n_scenes)
        ]
        criterion = CriterionConfig(**data.get("criterion", {}))
        cfg = TrainConfig(criterion=criterion, **tr)
        variants = {v["name"]: v.get("criterion", {}) for v in data.get("variants", [])}
        for over in variants.values():
            criterion.with_(**over)
    except ValueError as exc:
        raise io.FormatError(str(exc)) from exc
    out = Path(args.out or data.get("output_dir") or ".")
    return data, scenes, cfg, variants, out


def _write_comparison(cmp, out: Path, data) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, traces in cmp.traces.items():
        rows = []
        for si, tr in enumerate(traces):
            recs = tr.records + [tr.final]
            for step, r in enumerate(recs):
                rows.append([si, step, r.total, r.cls_pos, r.cls_neg, r.reg_l1, r.reg_giou,
                             r.pearson, r.br_recall_1, r.br_recall_2])
        io.write_csv(out / f"trace_{name}.csv", TRACE_COLUMNS, rows)
    table = cmp.table()
    io.write_csv(out / "summary.csv", SUMMARY_COLUMNS, [[row[c] for c in SUMMARY_COLUMNS] for row in table])
    io.write_json({"config": data, "arms": table}, out / "summary.json")
    _emit({"arms": table})


def cmd_train(args) -> int:
    data, scenes, cfg, _, out = _experiment(args)
    _write_comparison(compare_variants(scenes, cfg, {"base": {}}), out, data)
    return 0


def cmd_compare(args) -> int:
    data, scenes, cfg, variants, out = _experiment(args)
    if not variants:
        raise io.FormatError("compare needs a non-empty 'variants' list")
    _write_comparison(compare_variants(scenes, cfg, variants), out, data)
    return 0


def cmd_diagnose(args) -> int:
    files = args.files
    if len(files) % 2:
        raise io.FormatError("diagnose takes SCENE PREDS pairs")
    samples = []
    for scene_path, preds_path in zip(files[::2], files[1::2]):
        scene = io.load_scene(scene_path)
        if len(scene) == 0:
            raise io.FormatError(f"{scene_path}: diagnostics need at least one ground truth")
        layers = io.load_predictions(preds_path, scene.n_classes)
        samples.append((layers[-1], scene))
    ms = tuple(range(1, args.max_m + 1))
    rep = alignment_report(samples, ms=ms, bins=args.bins, pooled=args.pooled)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    edges = rep.bin_edges
    io.write_csv(out / "recall.csv", ["m", "br_recall"], [[m, r] for m, r in rep.br_recall_at.items()])
    dens = [
        [edges[i], edges[i + 1], edges[j], edges[j + 1], int(rep.density[i, j])]
        for i in range(args.bins)
        for j in range(args.bins)
    ]
    io.write_csv(out / "density.csv", ["conf_lo", "conf_hi", "iou_lo", "iou_hi", "count"], dens)
    hist = [[edges[i], edges[i + 1], int(rep.hc_iou_hist[i]), int(rep.br_iou_hist[i])] for i in range(args.bins)]
    io.write_csv(out / "histograms.csv", ["iou_lo", "iou_hi", "hc_count", "br_count"], hist)
    summary = {"br_recall": {str(m): r for m, r in rep.br_recall_at.items()}, "pearson_r": rep.pearson_r}
    io.write_json(summary, out / "summary.json")
    _emit(summary)
    return 0


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="align-criterion", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("match", help="assign predictions of one layer to ground truths")
    m.add_argument("scene")
    m.add_argument("preds")
    m.add_argument("--k", type=_positive_int, default=1, help="GT replication factor (default 1)")
    m.add_argument("--layer", type=int, default=-1, help="prediction layer (default: last)")
    m.add_argument("--solver", choices=("hungarian", "brute"), default="hungarian")
    m.add_argument("--seed", type=int, default=0, help="accepted for uniformity; matching is deterministic")
    m.set_defaults(func=cmd_match)

    lo = sub.add_parser("loss", help="evaluate the layered criterion")
    lo.add_argument("scene")
    lo.add_argument("preds")
    lo.add_argument("--variant", default="ia_bce", help="ia_bce, focal, vfl, qfl:<gamma>, table_a:<form>")
    lo.add_argument("--alpha", type=float, default=0.25)
    lo.add_argument("--tau", type=float, default=1.5)
    lo.add_argument("--k", type=_positive_int, default=3)
    lo.add_argument("--no-prime", action="store_true", help="disable rank-based sample weights")
    lo.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the loss is deterministic")
    lo.set_defaults(func=cmd_loss)

    g = sub.add_parser(
        "gradcheck",
        help="finite-difference check of analytic gradients",
        epilog=f"stdout columns: {', '.join(GRADCHECK_COLUMNS)}",
    )
    g.add_argument("--variant", action="append", help="repeatable; 'all' (default) checks every variant")
    g.add_argument("--seeds", type=_positive_int, default=10, help="number of random problems per variant")
    g.add_argument("--seed", type=int, default=0, help="first problem seed")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--k", type=_positive_int, default=3)
    g.set_defaults(func=cmd_gradcheck)

    fmt = argparse.RawDescriptionHelpFormatter
    for name, func, helptext in (
        ("train", cmd_train, "train the configured criterion on toy scenes"),
        ("compare", cmd_compare, "train every configured variant on the same scenes"),
    ):
        t = sub.add_parser(name, help=helptext, epilog=TRAIN_EPILOG, formatter_class=fmt)
        t.add_argument("config", help="experiment config JSON")
        t.add_argument("--seed", type=int, default=None, help="overrides scene and train seeds")
        t.add_argument("--out", help="output directory (overrides output_dir)")
        t.set_defaults(func=func)

    d = sub.add_parser("diagnose", help="alignment diagnostics", epilog=DIAGNOSE_EPILOG, formatter_class=fmt)
    d.add_argument("files", nargs="+", metavar="SCENE PREDS", help="one or more scene/predictions pairs")
    d.add_argument("--bins", type=int, default=10)
    d.add_argument("--max-m", type=_positive_int, default=3, help="recall is reported for m = 1..max-m")
    d.add_argument("--pooled", action="store_true", help="pool hits over scenes instead of averaging")
    d.add_argument("--out", default=".", help="output directory")
    d.add_argument("--seed", type=int, default=0, help="accepted for uniformity; diagnostics are deterministic")
    d.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "bins", 2) < 2:
        print("error: --bins must be >= 2", file=sys.stderr)
        return EXIT_PARSE
    try:
        return args.func(args)
    except InfeasibleReplication as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
