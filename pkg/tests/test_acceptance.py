"""Acceptance criteria, one test per criterion.

Every test records a verdict line that is printed in the terminal summary,
so ``pytest tests/test_acceptance.py`` ends with a PASS/FAIL table.
Tolerances are fixed here and never loosened to make a run pass.
"""

import itertools
import math
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from conftest import record
from wstan import autodiff as ad
from wstan import losses as L
from wstan import pipeline as P
from wstan.config import RunConfig
from wstan.evaluation import mean_iou, nms, recall_at_k
from wstan.gradcheck import TOL, run_suite
from wstan.model import WSTAN, matching_score
from wstan.moment_map import valid_mask
from wstan.synth import gen_corpus, make_training_pair

GRAD_TOL = 1e-4
GRAD_SECONDS = 120.0
TRAIN_SECONDS = 15 * 60.0
RATIO, ABSOLUTE = 3.0, 40.0
NEG_LO, NEG_HI = 0.48, 0.52
ABLATION_SEEDS = (7, 8, 9)


# --------------------------------------------------------------------------
# shared end-to-end run (criteria 8, 9, 10)
# --------------------------------------------------------------------------

def _run(cfg: RunConfig, train, test, out_dir, tag):
    t0 = time.perf_counter()
    model, vocab, rows = P.train(cfg, train, log_path=out_dir / f"{tag}.log.csv")
    P.save_model(out_dir / f"{tag}.ckpt", model, vocab, cfg)
    result = P.evaluate(model, vocab, test, cfg)
    result.report.to_csv(out_dir / f"{tag}.csv")
    return {"report": result.report, "rows": rows, "seconds": time.perf_counter() - t0,
            "ckpt": (out_dir / f"{tag}.ckpt").read_bytes(),
            "csv": (out_dir / f"{tag}.csv").read_bytes()}


@pytest.fixture(scope="module")
def default_corpus():
    cfg = RunConfig()
    train, test, _ = gen_corpus(cfg.data_config(), cfg.seed)
    return cfg, train, test


@pytest.fixture(scope="module")
def full_run(default_corpus, tmp_path_factory):
    cfg, train, test = default_corpus
    assert cfg.variant == "full" and cfg.epochs <= 30
    return _run(cfg, train, test, tmp_path_factory.mktemp("full"), "full")


# --------------------------------------------------------------------------
# criteria
# --------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(points=25, seed=0)
    seconds = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    failed = [r.name for r in results if r.max_error > GRAD_TOL]
    ok = TOL == GRAD_TOL and not failed and seconds <= GRAD_SECONDS
    record(1, ok, f"{len(results)} checks x 25 points, worst rel err {worst:.2e} "
                  f"(tol {GRAD_TOL:g}), {seconds:.1f}s (limit {GRAD_SECONDS:.0f}s)"
                  + (f", failed: {', '.join(failed)}" if failed else ""))
    assert ok


def _brute_labels(vals, o_min, o_max):
    n = vals.shape[0]
    cells = [(i, j) for i in range(n) for j in range(i, n)]
    ai, aj = max(cells, key=lambda c: (vals[c], -c[0], -c[1]))
    labels = np.zeros((n, n))
    hits = {"lo": 0, "hi": 0}
    for i, j in cells:
        inter = max(0, min(j, aj) + 1 - max(i, ai))
        union = max(j, aj) + 1 - min(i, ai)
        o = inter / union
        hits["lo"] += o == o_min
        hits["hi"] += o == o_max
        labels[i, j] = 0.0 if o <= o_min else 1.0 if o >= o_max else (o - o_min) / (o_max - o_min)
    return labels, vals[ai, aj], hits


def test_criterion_02_pseudo_label_oracle():
    rng = np.random.default_rng(2)
    # thresholds include IoU values that clip spans actually attain (1/2, 1/4, 3/4, 1)
    pairs = [(0.9, 1.0), (0.5, 1.0), (0.25, 0.75), (0.5, 0.75), (0.0, 0.5), (0.3, 0.9)]
    mismatches = 0
    boundary = {"lo": 0, "hi": 0}
    for trial in range(200):
        n = int(rng.integers(1, 9))
        o_min, o_max = pairs[trial % len(pairs)]
        vals = np.where(valid_mask(n), rng.uniform(size=(n, n)), 0.0)
        got, w = L.pseudo_labels(vals, L.Thresholds(o_min, o_max))
        want, best, hits = _brute_labels(vals, o_min, o_max)
        boundary["lo"] += hits["lo"]
        boundary["hi"] += hits["hi"]
        mismatches += int(not (np.array_equal(got, want) and w == best))
    ok = mismatches == 0 and boundary["lo"] > 0 and boundary["hi"] > 0
    record(2, ok, f"200 trials N<=8, {mismatches} mismatches (zero tolerance); "
                  f"{boundary['lo']} cells at IoU=o_min, {boundary['hi']} at IoU=o_max")
    assert ok


def test_criterion_03_mask_invariant():
    rng = np.random.default_rng(3)
    base = RunConfig()
    bad = 0
    for trial in range(50):
        n = (4, 16)[trial % 2]
        cfg = base.replace(n_clips=n, backend=("stackconv", "pool")[(trial // 2) % 2])
        model = WSTAN(cfg.model_config(), vocab_size=20, seed=trial)
        for t in model.parameters():  # perturb away from the init so biases are nonzero
            t.values += rng.normal(0, 0.1, size=t.shape)
        sents = [list(rng.integers(1, 20, size=rng.integers(1, 6))) for _ in range(rng.integers(1, 4))]
        with ad.no_grad():
            out = model.forward(rng.normal(size=(n, cfg.d_v)), sents)
        lower = ~valid_mask(n)
        bad += int(np.any(out.p_m.values[:, lower] != 0.0) or np.any(out.p_cb.values[:, lower] != 0.0))
    record(3, bad == 0, f"50 forward passes (N in {{4, 16}}), {bad} with a nonzero lower-triangle entry")
    assert bad == 0


def test_criterion_04_mil_aggregation():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(100):
        n_p, n = int(rng.integers(1, 5)), int(rng.integers(1, 17))
        maps = np.where(valid_mask(n), rng.uniform(size=(n_p, n, n)), 0.0)
        flat = -math.inf
        for k in range(n_p):
            for i in range(n):
                for j in range(i, n):
                    flat = max(flat, maps[k, i, j])
        p, k, (i, j) = matching_score([ad.constant(m) for m in maps])
        bad += int(not (float(p.values) == flat == maps[k, i, j]))
    record(4, bad == 0, f"100 trials, {bad} differ from the flat max (exact)")
    assert bad == 0


def test_criterion_05_gating():
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(100):
        a = float(rng.uniform(0.01, 0.98))
        b = float(rng.uniform(0, 1 - a))
        weights = L.LossWeights(a, b, 1 - a - b)
        p = ad.constant(rng.uniform(0.001, 0.999))
        comps = {"mil": L.mil_loss(p, 0), "cb": ad.constant(rng.uniform(0, 5)),
                 "sd": ad.constant(rng.uniform(0, 5)), "cb_sd": ad.constant(rng.uniform(0, 5))}
        bad += int(float(L.total_loss(comps, weights, 0).values) != a * float(L.mil_loss(p, 0).values))
    record(5, bad == 0, f"100 trials with y_m=0, {bad} differ from alpha * L_mil (exact)")
    assert bad == 0


def _interval_iou(a, b):
    inter = Fraction(max(0, min(a[1], b[1]) - max(a[0], b[0])))
    return inter / (max(a[1], b[1]) - min(a[0], b[0]))


def _brute_nms(pred, thr):
    kept = []
    for cand in pred:
        if all(_interval_iou(cand[0], k[0]) <= Fraction(thr) for k in kept):
            kept.append(cand)
    return kept


def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    bad = {"recall": 0, "miou": 0, "nms": 0, "idempotent": 0}
    for _ in range(50):
        samples = []
        for _ in range(int(rng.integers(1, 8))):
            cands = []
            for _ in range(int(rng.integers(1, 7))):
                s = int(rng.integers(0, 10))
                cands.append(((float(s), float(s + rng.integers(1, 6))), float(rng.uniform())))
            cands.sort(key=lambda c: -c[1])
            s = int(rng.integers(0, 10))
            samples.append((cands, (float(s), float(s + rng.integers(1, 6)))))
        k = int(rng.integers(1, 6))
        thr = float(rng.choice([0.25, 0.3, 0.5, 0.7]))
        nms_thr = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))

        hits = sum(any(_interval_iou(sp, gt) >= Fraction(thr) for sp, _ in pred[:k]) for pred, gt in samples)
        bad["recall"] += int(recall_at_k(samples, k, thr) != 100.0 * hits / len(samples))

        # per-sample IoUs rounded to doubles, then summed without further rounding
        total = sum((Fraction(float(_interval_iou(pred[0][0], gt))) for pred, gt in samples), Fraction(0))
        bad["miou"] += int(mean_iou(samples) != 100.0 * float(total) / len(samples))

        for pred, _ in samples:
            out = nms(pred, nms_thr)
            bad["nms"] += int(out != _brute_nms(pred, nms_thr))
            bad["idempotent"] += int(nms(out, nms_thr) != out)
    ok = not any(bad.values())
    record(6, ok, "50 instances (<=6 candidates, k<=5); mismatches "
                  + ", ".join(f"{k}={v}" for k, v in bad.items()))
    assert ok


def test_criterion_07_negative_rate(default_corpus):
    _, train, _ = default_corpus
    rng = np.random.default_rng(7)
    draws = 10_000
    neg = sum(make_training_pair(train[n % len(train)], train, rng).y_m == 0 for n in range(draws))
    frac = neg / draws
    ok = NEG_LO <= frac <= NEG_HI
    record(7, ok, f"y_m=0 fraction {frac:.4f} over {draws} draws (band [{NEG_LO}, {NEG_HI}])")
    assert ok


def test_criterion_08_end_to_end(default_corpus, full_run):
    cfg, _, test = default_corpus
    rand = P.random_baseline(test, cfg, seeds=range(10)).recall(1, 0.5)
    got = full_run["report"].recall(1, 0.5)
    target = max(RATIO * rand, ABSOLUTE)
    ok = got >= RATIO * rand and got >= ABSOLUTE and full_run["seconds"] <= TRAIN_SECONDS
    record(8, ok, f"Full R@1 IoU=0.5 = {got:.2f} vs random {rand:.2f} (need >= {target:.2f}); "
                  f"mIoU {full_run['report'].miou:.2f}; {cfg.epochs} epochs in "
                  f"{full_run['seconds']:.0f}s (limit {TRAIN_SECONDS:.0f}s)")
    assert ok


@pytest.mark.slow
def test_criterion_09_ablation_direction(default_corpus, full_run, tmp_path):
    cfg, train, test = default_corpus
    full, base = [], []
    for seed in ABLATION_SEEDS:
        c = cfg.replace(model_seed=seed, train_seed=seed)
        f = full_run if seed == cfg.model_seed == cfg.train_seed else _run(c, train, test, tmp_path, f"full{seed}")
        b = _run(c.replace(sd_mil=False, cb=False, sd_cb=False), train, test, tmp_path, f"base{seed}")
        full.append(f["report"].recall(1, 0.5))
        base.append(b["report"].recall(1, 0.5))
    ok = np.mean(full) >= np.mean(base)
    detail = (f"mean R@1 IoU=0.5 over seeds {ABLATION_SEEDS}: Full {np.mean(full):.2f} "
              f"{[round(v, 2) for v in full]}, Base {np.mean(base):.2f} {[round(v, 2) for v in base]}")
    record(9, True if ok else None, detail + ("" if ok else " (soft criterion, warning only)"))
    if not ok:
        warnings.warn(f"ablation direction reversed: {detail}")


def test_criterion_10_determinism(default_corpus, full_run, tmp_path):
    cfg, train, test = default_corpus
    again = _run(cfg, train, test, tmp_path, "again")
    same_ckpt = again["ckpt"] == full_run["ckpt"]
    same_csv = again["csv"] == full_run["csv"]
    record(10, same_ckpt and same_csv,
           f"rerun of criterion 8: checkpoint {'identical' if same_ckpt else 'DIFFERS'} "
           f"({len(again['ckpt'])} bytes), metrics CSV {'identical' if same_csv else 'DIFFERS'}")
    assert same_ckpt and same_csv


def test_default_run_mil_decreases_over_first_five_epochs(full_run):
    means = P.epoch_means(full_run["rows"])[:5]
    assert all(b < a for a, b in itertools.pairwise(means)), means
