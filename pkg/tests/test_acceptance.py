"""Acceptance criteria 1-9; each test records one pass/fail line."""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from hypercare import numerics as nx
from hypercare.cli import EXIT_OK, main
from hypercare.cohort import bayes_optimal_scores, generate_synthetic
from hypercare.evaluation import evaluate_scenarios, scenario_predictions
from hypercare.hypergraph import build_inference_graph
from hypercare.metrics import aupr, auroc, auroc_macro
from hypercare.model import bernoulli_kl, predict
from hypercare.numerics import ParamStore
from hypercare.pipeline import config_from_dict, grad_check, taylor_ratio, tiny_instance
from hypercare.training import (
    EmaState,
    GroupWeights,
    ema_update,
    finetune,
    finetune_group_loss,
    prepare_finetune,
    pretrain,
    reweight,
)

from conftest import record_criterion
from oracles import brute_aupr, brute_auroc, grid_reweight, normalized_similarities, random_reweight_draw


def test_criterion_1_gradient_check():
    start = time.perf_counter()
    err = grad_check()
    elapsed = time.perf_counter() - start
    ok = err <= 1e-4 and elapsed < 30
    record_criterion("1", ok, f"max_rel_err={err:.3e}, {elapsed:.1f} s")
    assert ok


def test_criterion_2_reweight_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        prev, s_b, s_e, tau = random_reweight_draw(rng)
        got = reweight(prev, s_b, s_e, tau).omega_b
        worst = max(worst, abs(got - grid_reweight(prev, normalized_similarities(s_b, s_e), tau)))
    ok = worst <= 2e-4
    record_criterion("2", ok, f"max |d omega_b|={worst:.2e} over 100 draws")
    assert ok


def test_criterion_3_simplex():
    rng = np.random.default_rng(3)
    w, worst, nonneg = GroupWeights(0.5, 0.5), 0.0, True
    for _ in range(1000):
        dim = int(rng.integers(2, 30))
        w = reweight(w, rng.normal(size=dim), rng.normal(size=dim), float(rng.uniform(0.05, 3)))
        worst = max(worst, abs(w.omega_b + w.omega_e - 1.0))
        nonneg &= w.omega_b >= 0 and w.omega_e >= 0
    ok = worst <= 1e-12 and nonneg
    record_criterion("3", ok, f"max |sum-1|={worst:.1e}, nonnegative={nonneg}")
    assert ok


def test_criterion_4_taylor():
    ratios = {a: taylor_ratio(a) for a in (1e-2, 1e-3)}
    ok = all(r <= 0.35 for r in ratios.values())
    record_criterion("4", ok, ", ".join(f"ratio@{a:g}={r:.3f}" for a, r in ratios.items()))
    assert ok


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(200):
        n, t = int(rng.integers(2, 51)), int(rng.integers(1, 6))
        scores = rng.integers(0, int(rng.integers(2, 20)), size=(n, t)) / 7.0
        labels = rng.random((n, t)) < rng.uniform(0.1, 0.9)
        for j in range(t):
            s, y = scores[:, j], labels[:, j]
            if y.any():
                mismatches += aupr(s, y) != brute_aupr(s.tolist(), y.tolist())
            if y.any() and not y.all():
                mismatches += auroc(s, y) != brute_auroc(s.tolist(), y.tolist())
    example = auroc([0.8, 0.6, 0.4, 0.2], [1, 0, 1, 0])
    ok = mismatches == 0 and example == 0.75
    record_criterion("5", ok, f"{mismatches} mismatches, example={example}")
    assert ok


def test_criterion_6_ema_and_consistency():
    rng = np.random.default_rng(6)
    inst = tiny_instance(0)
    theta = inst.params
    other = ParamStore({k: v + rng.normal(size=v.shape) for k, v in theta.items()})
    copy_ok = ema_update(EmaState(other.copy(), 0.0), theta).params.bitwise_equal(theta)
    frozen_ok = ema_update(EmaState(other.copy(), 1.0), theta).params.bitwise_equal(other)
    pred = nx.constant(predict(inst.graph, theta, inst.cfg, inst.edges))
    kl = abs(float(bernoulli_kl(pred, pred.value).value))
    ema = EmaState.from_params(theta, 0.5)
    full = float(finetune_group_loss(theta, ema, inst.graph, inst.cfg, inst.edges, inst.labels, 1.0).value)
    bce = float(finetune_group_loss(theta, ema, inst.graph, inst.cfg, inst.edges, inst.labels, 0.0).value)
    ok = copy_ok and frozen_ok and kl <= 1e-12 and abs(full - bce) <= 1e-12
    record_criterion("6", ok, f"beta=0 copy={copy_ok}, beta=1 frozen={frozen_ok}, KL={max(kl, abs(full - bce)):.1e}")
    assert ok


def test_criterion_7_permutation_invariance(small_cohort):
    rng = np.random.default_rng(7)
    cfg = config_from_dict({"model": {"d": 16, "h": 4, "L": 3, "d_m": 32}})
    pre = pretrain(small_cohort, cfg.model, replace(cfg.train, iter_pretrain=5))
    params, base, _ = prepare_finetune(pre.params, small_cohort, cfg.train)
    worst = 0.0
    for scenario in ("basic", "full"):
        g = build_inference_graph(base, small_cohort, "test", scenario)
        edges = np.arange(g.num_edges)
        ref = predict(g, params, cfg.model, edges)
        for _ in range(3):
            worst = max(worst, float(np.max(np.abs(predict(g.shuffled(rng), params, cfg.model, edges) - ref))))
    inst = tiny_instance(0)
    ref = predict(inst.graph, inst.params, inst.cfg, inst.edges)
    for _ in range(5):
        worst = max(worst, float(np.max(np.abs(predict(inst.graph.shuffled(rng), inst.params, inst.cfg, inst.edges) - ref))))
    ok = worst <= 1e-10
    record_criterion("7", ok, f"max prediction change={worst:.1e}")
    assert ok


SEEDS = (0, 1, 2)


def run_seed(seed):
    cfg = config_from_dict({"seed": seed})
    cohort = generate_synthetic(cfg.synthetic)
    pre = pretrain(cohort, cfg.model, cfg.train)
    ours = finetune(pre.params, cohort, cfg.model, cfg.train)
    vanilla = finetune(pre.params, cohort, cfg.model, replace(cfg.train, enable_sr=False, enable_gr=False))
    start = prepare_finetune(pre.params, cohort, cfg.train)[0]

    def test_auroc(params):
        t = evaluate_scenarios(params, cohort, cfg.model, "test", base=ours.graph)
        return t.scores["basic"]["auroc_macro"], t.scores["full"]["auroc_macro"]

    visits = cohort.select(splits=("test",), groups=("extra",))
    preds = scenario_predictions(ours.params, cohort, cfg.model, "test", ours.graph)
    assert preds["full"][2] == [v.visit_id for v in visits]
    y = cohort.label_matrix(visits)
    bayes = auroc_macro(bayes_optimal_scores(cohort, cfg.synthetic, "full", visits), y)
    return {"ours": test_auroc(ours.params), "vanilla": test_auroc(vanilla.params),
            "pretrained": test_auroc(start), "bayes_full": bayes}


@pytest.fixture(scope="module")
def synthetic_runs():
    start = time.perf_counter()
    runs = [run_seed(s) for s in SEEDS]
    elapsed = time.perf_counter() - start
    mean = lambda key, i: float(np.mean([r[key][i] for r in runs]))
    summary = {
        "basic": mean("ours", 0), "full": mean("ours", 1),
        "pre_basic": mean("pretrained", 0),
        "van_basic": mean("vanilla", 0), "van_full": mean("vanilla", 1),
        "bayes_full": float(np.mean([r["bayes_full"] for r in runs])),
        "elapsed": elapsed,
    }
    print(json.dumps({"per_seed": runs, "mean": summary}, indent=1, default=float))
    return summary


def test_criterion_8_runtime(synthetic_runs):
    ok = synthetic_runs["elapsed"] < 600
    record_criterion("8", ok, f"3 seeds pretrain + two finetunes in {synthetic_runs['elapsed']:.0f} s")
    assert ok


def test_criterion_8a_extra_features_help(synthetic_runs):
    s = synthetic_runs
    ok = s["full"] >= s["basic"] + 0.03
    record_criterion("8a", ok, f"full {s['full']:.4f} vs basic {s['basic']:.4f} + 0.03")
    assert ok


def test_criterion_8b_near_bayes(synthetic_runs):
    s = synthetic_runs
    ok = abs(s["full"] - s["bayes_full"]) <= 0.05
    record_criterion("8b", ok, f"full {s['full']:.4f} vs Bayes {s['bayes_full']:.4f}")
    assert ok


def test_criterion_8c_forgetting(synthetic_runs):
    s = synthetic_runs
    ok = s["basic"] >= s["pre_basic"] - 0.02
    record_criterion("8c", ok, f"finetuned basic {s['basic']:.4f} vs pretrained {s['pre_basic']:.4f} - 0.02 "
                               f"(vanilla basic {s['van_basic']:.4f})")
    assert ok


def test_criterion_8d_non_inferior_to_vanilla(synthetic_runs):
    s = synthetic_runs
    ours, van = (s["basic"] + s["full"]) / 2, (s["van_basic"] + s["van_full"]) / 2
    ok = ours >= van - 0.01
    record_criterion("8d", ok, f"mean AUROC {ours:.4f} vs vanilla {van:.4f} - 0.01")
    assert ok


def test_criterion_9_determinism(tmp_path):
    doc = {"seed": 11,
           "cohort": {"synthetic": {"n_visits": 600, "n_basic": 12, "n_extra": 10, "extra_fraction": 0.25}},
           "model": {"d": 16, "h": 4, "L": 2, "d_m": 32},
           "train": {"iter_pretrain": 30, "iter_finetune": 15}}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    reports = []
    for name in ("first", "second"):
        assert main(["run-all", "--config", str(path), "--out", str(tmp_path / name)]) == EXIT_OK
        reports.append([(tmp_path / name / f).read_bytes() for f in ("report.csv", "report.json")])
    ok = reports[0] == reports[1]
    record_criterion("9", ok, "report.csv and report.json byte-identical across two run-all executions")
    assert ok
