"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line."""

import json
import math
import statistics
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from align_criterion.cli import main
from align_criterion.criterion import ALL_VARIANTS, CriterionConfig, Variant, prime_weights, quality, total_loss
from align_criterion.gradcheck import check_criterion, random_problem
from align_criterion.matching import brute_force_match, hungarian, match_many_to_one, match_one_to_one
from align_criterion.structures import PredictionSet
from align_criterion.toytrain import SceneSpec, TrainConfig, compare_variants, generate_scene, steps_to_threshold

FIX = Path(__file__).parent / "fixtures"
N_RUNS = 20


def report(capsys, number: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")


def test_1_hungarian_equals_brute_force(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches, trials = 0, 600
    for _ in range(trials):
        small = int(rng.integers(1, 8))
        large = int(rng.integers(small, 9))
        shape = (large, small) if rng.random() < 0.5 else (small, large)
        cost = rng.normal(size=shape) * 10 ** rng.uniform(-3, 3)
        if hungarian(cost).total_cost != brute_force_match(cost).total_cost:
            mismatches += 1
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 10
    report(capsys, 1, ok, f"{trials} matrices, {mismatches} mismatches, {elapsed:.2f}s (limit 10s)")
    assert mismatches == 0
    assert elapsed < 10


def test_2_gradients_match_finite_differences(capsys):
    n_scenes = 100
    t0 = time.perf_counter()
    worst = {}
    for v in ALL_VARIANTS:
        cfg = CriterionConfig(variant=v)
        worst[v.name] = 0.0
        for seed in range(n_scenes):
            logits, boxes, scene = random_problem(seed)
            worst[v.name] = max(worst[v.name], check_criterion(logits, boxes, scene, cfg).max_rel_err)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= 1e-4 and elapsed < 60
    report(capsys, 2, ok, f"{len(ALL_VARIANTS)} variants x {n_scenes} scenes, max rel err {top:.2e}, {elapsed:.1f}s (limit 60s)")
    assert top <= 1e-4, worst
    assert elapsed < 60


def test_3_closed_form_anchors(capsys):
    mpmath.mp.dps = 30
    q_oracle = float(mpmath.mpf("0.5") ** mpmath.mpf("0.25") * mpmath.mpf("0.8") ** mpmath.mpf("0.75"))
    w_oracle = float(mpmath.exp(-1 / mpmath.mpf("1.5")))
    q = quality(0.5, 0.8, 0.25)
    w = prime_weights([0.9, 0.4], 1.5)[1]
    us = np.linspace(0.0, 1.0, 101)
    alpha0 = all(quality(s, u, 0.0) == u for s in (0.01, 0.5, 0.99) for u in us)
    ok = abs(q - q_oracle) <= 1e-5 and abs(w - 0.51342) <= 1e-5 and alpha0
    report(capsys, 3, ok, f"quality={q:.7f} (oracle {q_oracle:.7f}), w(rank 1)={w:.6f}, alpha=0 gives t=u: {alpha0}")
    assert q == pytest.approx(q_oracle, abs=1e-5)
    assert w == pytest.approx(0.51342, abs=1e-5)
    assert w == pytest.approx(w_oracle, abs=1e-12)
    assert alpha0


def _layers(rng, scene, n_layers, n_pred):
    out = []
    for _ in range(n_layers):
        src = scene.boxes[rng.integers(len(scene), size=n_pred)]
        bx = src + rng.normal(0, 0.06, (n_pred, 4))
        bx[:, 2:] = np.clip(bx[:, 2:], 0.03, None)
        out.append(PredictionSet(rng.uniform(0.02, 0.98, (n_pred, scene.n_classes)), bx))
    return out


def test_4_reduction_identities(capsys):
    rng = np.random.default_rng(7)
    cost_ok = count_ok = True
    tau_dev = 0.0
    for i in range(50):
        scene = generate_scene(SceneSpec(n_gt=1 + i % 6, seed=1000 + i))
        layers = _layers(rng, scene, 3, 18)
        for lyr in layers:
            if match_many_to_one(lyr, scene, k=1).total_cost != match_one_to_one(lyr, scene).total_cost:
                cost_ok = False
        k1 = total_loss(layers, scene, CriterionConfig(k=1), with_grad=False)
        for lr, lyr in zip(k1.layers, layers):
            if lr.assignment.pairs != match_one_to_one(lyr, scene).pairs:
                cost_ok = False
        for L, k in ((3, 3), (2, 2), (4, 3), (1, 3)):
            if k * len(scene) > 18:
                continue
            rep = total_loss(layers[:1] * L, scene, CriterionConfig(k=k), with_grad=False)
            if rep.positive_counts(len(scene)) != [(L - 1) * (k - 1) + L] * len(scene):
                count_ok = False
        if 3 * len(scene) <= 18:
            flat = total_loss(layers, scene, CriterionConfig(k=3, tau=1e9), with_grad=False)
            for lr in flat.layers:
                tau_dev = max(tau_dev, float(np.max(np.abs(lr.targets.weight - 1))))
    ok = cost_ok and count_ok and tau_dev <= 1e-8
    report(capsys, 4, ok, f"k=1 equals one-to-one: {cost_ok}; positives (L-1)(k-1)+L: {count_ok}; tau=1e9 max |w-1|={tau_dev:.1e}")
    assert cost_ok and count_ok
    assert tau_dev <= 1e-8


# ---------------------------------------------------------------------------
# toy-training comparisons (shared runs)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def training_runs():
    scenes = [generate_scene(SceneSpec(n_gt=1 + i % 5, seed=i)) for i in range(N_RUNS)]
    base = TrainConfig()  # L=3, 20 queries, 2000 steps, k=3, IA-BCE
    t0 = time.perf_counter()
    main_arms = compare_variants(scenes, base, {"ia_bce": {}, "focal": {"variant": Variant("focal")}})
    main_time = time.perf_counter() - t0
    ablations = compare_variants(scenes, base, {"k1": {"k": 1}, "no_prime": {"prime_weighting": False}})
    return {"main": main_arms, "main_time": main_time, "ablations": ablations}


def _paired_sem(a, b) -> float:
    d = [x - y for x, y in zip(a, b)]
    return statistics.stdev(d) / math.sqrt(len(d))


def test_5_ia_bce_improves_alignment_over_focal(capsys, training_runs):
    arms = training_runs["main"].arms
    ia, fo = arms["ia_bce"], arms["focal"]
    r_gap = statistics.fmean(ia.pearson) - statistics.fmean(fo.pearson)
    b_gap = statistics.fmean(ia.br_recall) - statistics.fmean(fo.br_recall)
    r_se = _paired_sem(ia.pearson, fo.pearson)
    b_se = _paired_sem(ia.br_recall, fo.br_recall)
    elapsed = training_runs["main_time"]
    ok = r_gap > r_se and b_gap > b_se and elapsed < 600
    report(
        capsys, 5, ok,
        f"pearson gap {r_gap:+.2e} (se {r_se:.2e}), br_recall@1 gap {b_gap:+.2e} (se {b_se:.2e}), {elapsed:.0f}s (limit 600s)",
    )
    assert elapsed < 600
    assert r_gap > r_se
    assert b_gap > b_se


def test_6_replication_does_not_slow_convergence(capsys, training_runs):
    k3 = training_runs["main"].traces["ia_bce"]
    k1 = training_runs["ablations"].traces["k1"]
    steps = {"k3": [], "k1": []}
    for a, b in zip(k3, k1):
        la, lb = a.losses + [a.final.total], b.losses + [b.final.total]
        best = min(min(la), min(lb))
        for key, losses in (("k3", la), ("k1", lb)):
            s = steps_to_threshold(losses, best)
            steps[key].append(math.inf if s is None else s)
    m3, m1 = statistics.median(steps["k3"]), statistics.median(steps["k1"])
    ok = m3 <= m1
    reached = {k: sum(math.isfinite(s) for s in v) for k, v in steps.items()}
    report(capsys, 6, ok, f"median steps-to-threshold k=3: {m3}, k=1: {m1} (runs reaching threshold {reached})")
    assert m3 <= m1


def test_7_prime_weighting_does_not_hurt_recall(capsys, training_runs):
    on = statistics.fmean(training_runs["main"].arms["ia_bce"].br_recall)
    off = statistics.fmean(training_runs["ablations"].arms["no_prime"].br_recall)
    report(capsys, 7, on >= off, f"mean br_recall@1 with weighting {on:.4f}, without {off:.4f}")
    assert on >= off


def _run_capture(argv, capsys):
    code = main([str(a) for a in argv])
    out, _ = capsys.readouterr()
    return code, out


def _snapshot(directory: Path) -> dict:
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


def test_8_cli_outputs_are_byte_identical(capsys, tmp_path):
    scene, preds = FIX / "scene_two.json", FIX / "preds_six.json"
    commands = {
        "match": ["match", scene, preds, "--k", 3, "--layer", 0],
        "match-brute": ["match", scene, preds, "--k", 3, "--layer", 0, "--solver", "brute"],
        "loss": ["loss", scene, preds, "--variant", "ia_bce", "--k", 3],
        "gradcheck": ["gradcheck", "--variant", "ia_bce", "--variant", "qfl:1", "--seeds", 2, "--seed", 5],
        "train": ["train", FIX / "experiment.json", "--seed", 11],
        "compare": ["compare", FIX / "experiment.json", "--seed", 11],
        "diagnose": ["diagnose", scene, preds, FIX / "scene_one.json", FIX / "preds_one.json", "--bins", 5],
    }
    differing = []
    for name, argv in commands.items():
        runs = []
        for rep in range(2):
            out_dir = tmp_path / f"{name}-{rep}"
            extra = ["--out", out_dir] if name in ("train", "compare", "diagnose") else []
            code, out = _run_capture(argv + extra, capsys)
            files = _snapshot(out_dir) if extra else {}
            runs.append((code, out, files))
        if runs[0] != runs[1] or runs[0][0] != 0:
            differing.append(name)
    ok = not differing
    report(capsys, 8, ok, f"{len(commands)} commands run twice, differing or failing: {differing or 'none'}")
    assert not differing
    json.loads(runs[0][1])  # the last command printed valid JSON
