"""Acceptance criteria 1-8, one test each, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v`` (criterion 5 trains the full
mirrored-summation grid and takes the better part of an hour on one core).
"""

import json
import time

import numpy as np
import pytest

from mstransformer.attention import init_head, parse_scales, sasa_head
from mstransformer.autograd import Tensor
from mstransformer.cli import main
from mstransformer.manifest import RunManifest
from mstransformer.model import Model, ModelConfig
from mstransformer.planner import plan_scales
from mstransformer.probe import distance_histogram, edge_keys, probe_model
from mstransformer.synthetic import GridSettings, median_table, run_grid, trivial_mse
from mstransformer.textdata import LabelSet, Vocab, keyword_task, to_dataset
from mstransformer.training import TrainConfig, evaluate, train


@pytest.fixture
def report(capsys):
    def emit(number: int, passed: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
    return emit


# 1 -----------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(tmp_path, report):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--scope", "all", "--out", str(tmp_path)])
    seconds = time.perf_counter() - t0
    m = RunManifest.read(tmp_path / "manifest.json")
    worst = max(c["error"] for c in m.metrics["checks"])
    names = {c["name"] for c in m.metrics["checks"]}
    both_layers = any("ms_transformer_layer" in n for n in names) and any("vanilla" in n for n in names)
    ok = code == 0 and m.metrics["failed"] == 0 and worst <= 1e-4 and seconds < 120 and both_layers
    report(1, ok, f"{len(names)} checks, worst rel err {worst:.2e}, {seconds:.1f}s")
    assert ok


# 2 -----------------------------------------------------------------------------

def standard_head(h, p):
    q, k, v = h @ p.wq.data, h @ p.wk.data, h @ p.wv.data
    s = q @ k.T / np.sqrt(q.shape[1])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


def copy_ms_into_vanilla(ms, van):
    dst = van.named_parameters()
    for name, t in ms.named_parameters().items():
        dst[name.replace(".g0.", ".").replace(".ln.", ".ln1.")].data = t.data.copy()


def test_criterion_2_oracle_equivalence(report):
    rng = np.random.default_rng(2024)
    worst_head = worst_stack = 0.0
    for case in range(20):
        n = int(rng.integers(1, 17))
        heads = int(rng.integers(1, 5))
        dh = int(rng.integers(1, 33 // heads + 1))
        d = min(32, heads * dh + int(rng.integers(0, 4)))
        h = rng.standard_normal((n, d))
        p = init_head(rng, d, dh)
        width = 2 * n - 1 + 2 * int(rng.integers(0, 3))
        got = sasa_head(Tensor(h), p, width).data
        worst_head = max(worst_head, float(np.abs(got - standard_head(h, p)).max()))

        common = dict(vocab_size=50, n_layers=int(rng.integers(1, 4)), n_heads=heads,
                      d_model=d, head_dim=dh)
        ms = Model(ModelConfig(kind="ms", scales=str(2 * (n + 1) + 1), **common), seed=case)
        van = Model(ModelConfig(kind="vanilla", ffn=False, attn_activation="relu", **common),
                    seed=case + 1000)
        copy_ms_into_vanilla(ms, van)
        ids = rng.integers(0, 50, size=(2, n))
        h_ms, _ = ms.encode(ids)
        h_van, _ = van.encode(ids)
        worst_stack = max(worst_stack, float(np.abs(h_ms.data - h_van.data).max()))
    ok = worst_head <= 1e-10 and worst_stack <= 1e-10
    report(2, ok, f"20 cases: head max diff {worst_head:.1e}, stack max diff {worst_stack:.1e}")
    assert ok


# 3 -----------------------------------------------------------------------------

def test_criterion_3_locality(report):
    rng = np.random.default_rng(3)
    changed, tested = 0, 0
    while tested < 1000:
        n = int(rng.integers(2, 25))
        d, dh = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        width = int(rng.choice([1, 3, 5, 7, 9]))
        r = (width - 1) // 2
        p = init_head(rng, d, dh)
        h = rng.standard_normal((n, d))
        j = int(rng.integers(0, n))
        outside = [t for t in range(n) if abs(t - j) > r]
        if not outside:
            continue
        t = int(rng.choice(outside))
        h2 = h.copy()
        h2[t] = rng.standard_normal(d) * 10
        before = sasa_head(Tensor(h), p, width).data[j]
        after = sasa_head(Tensor(h2), p, width).data[j]
        tested += 1
        changed += not np.array_equal(before, after)
    ok = changed == 0
    report(3, ok, f"{tested} perturbations outside the window, {changed} changed the output")
    assert ok


# 4 -----------------------------------------------------------------------------

STATED_FRACTIONS = [4.287, 2.600, 1.577, 0.957, 0.580]


def test_criterion_4_planner(report):
    cands = parse_scales("1,3,N/16,N/8,N/4")
    problems = []
    for alpha in (-1.0, -0.5, 0.0, 0.5, 1.0):
        plans = plan_scales(alpha, 3, 10, cands)
        for p in plans:
            if p.total_heads != 10 or abs(sum(p.fractional) - 10) > 1e-9:
                problems.append(f"alpha={alpha} layer {p.layer} does not sum to 10")
        top = [c for _, c in plans[-1].allocations]
        if top != [2, 2, 2, 2, 2]:
            problems.append(f"alpha={alpha} top layer {top}")
        for p in plans[:-1]:
            f = np.diff(p.fractional)
            c = np.diff([c for _, c in p.allocations])
            good = {1: (f < 0).all() and (c <= 0).all(), -1: (f > 0).all() and (c >= 0).all(),
                    0: np.allclose(f, 0) and (c == 0).all()}[int(np.sign(alpha))]
            if not good:
                problems.append(f"alpha={alpha} layer {p.layer} not monotone")
    frac = plan_scales(0.5, 3, 10, cands)[0].fractional
    rounded = [round(x, 3) for x in frac]
    for k, (got, want) in enumerate(zip(rounded, STATED_FRACTIONS)):
        if got != want:
            problems.append(f"k={k}: {frac[k]:.6f} rounds to {got:.3f}, expected {want:.3f}")
    ok = not problems
    report(4, ok, "; ".join(problems) if problems else f"fractions {rounded}")
    assert ok, problems


# 5 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_mirrored_summation(report):
    settings = GridSettings()
    t0 = time.perf_counter()
    rows = run_grid(settings)
    seconds = time.perf_counter() - t0
    med = {(r["K"], r["model"]): r["test_mse"] for r in median_table(rows)}
    floor40 = trivial_mse(40)
    a = {m: med[(40, m)] < floor40 for m in settings.models}
    b_ratio = med[(10, "hier")] / med[(40, "hier")]
    c = med[(10, "flex")] <= med[(10, "hier")]
    checks = {"a": all(a.values()), "b": b_ratio >= 1.5, "c": c, "runtime": seconds <= 1800}
    table = ", ".join(f"K={k} {m}={v:.3f}" for (k, m), v in sorted(med.items()))
    detail = (f"(a) K=40 vs floor {floor40:.3f}: "
              + " ".join(f"{m}={'ok' if v else 'no'}" for m, v in a.items())
              + f"; (b) hier K10/K40 = {b_ratio:.3f}; (c) flex<=hier at K=10: {c}; "
              f"runtime {seconds / 60:.1f} min; medians: {table}")
    ok = all(checks.values())
    report(5, ok, detail)
    assert ok, checks


# 6 -----------------------------------------------------------------------------

def test_criterion_6_toy_classification(report):
    splits = {"train": keyword_task(2000, 0), "dev": keyword_task(500, 1), "test": keyword_task(500, 2)}
    vocab = Vocab.build(splits["train"])
    labels = LabelSet.build(splits["train"], splits["dev"], splits["test"])
    ds = {k: to_dataset(v, vocab, labels) for k, v in splits.items()}
    cfg = ModelConfig(vocab_size=len(vocab), n_classes=2)
    assert (cfg.kind, cfg.n_layers, cfg.n_heads) == ("ms", 2, 10)
    model = Model(cfg, seed=0)
    hist = train(model, ds["train"], TrainConfig(epochs=10), eval_set=ds["dev"])
    acc = evaluate(model, ds["test"])["accuracy"]
    ok = acc >= 0.95 and len(hist) - 1 <= 10
    report(6, ok, f"test accuracy {acc:.4f} after {len(hist) - 1} epochs "
                  f"(best dev epoch {hist[-1]['best_epoch']})")
    assert ok


# 7 -----------------------------------------------------------------------------

def brute_force_argmax(attn):
    keys = []
    for row in attn:
        best = 0
        for c in range(len(row)):
            if row[c] > row[best]:
                best = c
        keys.append(best)
    return keys


def test_criterion_7_probe(report):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        attn = rng.dirichlet(np.ones(n), size=n)
        if rng.random() < 0.25:
            attn = np.round(attn, 1)
        mismatches += edge_keys(attn).tolist() != brute_force_argmax(attn)

    model = Model(ModelConfig(vocab_size=40, scales="1,3,N/16,N/8,N/4,N/2", alpha=0.5), seed=7)
    corpus = [rng.integers(0, 40, size=(1, int(rng.integers(2, 60)))) for _ in range(40)]
    rep = probe_model(model, corpus)
    rows = rep.histograms()
    groups = {}
    for r in rows:
        groups[(r["layer"], r["head"])] = groups.get((r["layer"], r["head"]), 0.0) + r["percentage"]
    worst_sum = max(abs(s - 100.0) for s in groups.values())
    for truncate in (True, False):
        for key in rep.distances:
            pct = distance_histogram(rep.head_distances(*key), rep.n, truncate_at_half=truncate)
            worst_sum = max(worst_sum, abs(pct.sum() - 100.0))
    violations = sum(int(rep.head_distances(*key).max() > (w - 1) // 2)
                     for key, w in rep.widths.items())
    ok = mismatches == 0 and worst_sum <= 1e-9 and violations == 0
    report(7, ok, f"argmax mismatches {mismatches}/1000, histogram sum error {worst_sum:.1e}, "
                  f"locality violations {violations}")
    assert ok


# 8 -----------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, report):
    ckpt_run = tmp_path / "classify"
    runs = {
        "plan": ["plan", "--alpha", "0.5", "--n", "40"],
        "mirrored": ["mirrored", "--n", "12", "--d", "3", "--ks", "3,12", "--seeds", "0,1",
                     "--n-train", "256", "--n-test", "64", "--epochs", "2", "--d-model", "8",
                     "--head-dim", "2", "--heads", "5", "--models", "hier,flex,trans"],
        "classify": ["classify", "--keyword-task", "300", "--epochs", "2", "--d-model", "8",
                     "--head-dim", "2", "--heads", "5"],
        "probe": ["probe", "--checkpoint", str(ckpt_run / "checkpoint"), "--random", "10",
                  "--length", "20", "--seed", "3"],
        "gradcheck": ["gradcheck", "--scope", "all"],
        "bench": ["bench", "--lengths", "16,32", "--batch", "2", "--repeats", "1"],
    }
    outcome = {}
    for name, argv in runs.items():
        out = ckpt_run if name == "classify" else tmp_path / name
        first = main([*argv, "--out", str(out)])
        again = main(["replay", str(out / "manifest.json"), "--out", str(tmp_path / f"{name}-replay")])
        m = RunManifest.read(tmp_path / f"{name}-replay" / "manifest.json")
        outcome[name] = first == 0 and again == 0 and m.metrics["reproduced"]
    ok = all(outcome.values())
    report(8, ok, " ".join(f"{k}={'same' if v else 'DIFFERENT'}" for k, v in outcome.items()))
    assert ok, json.dumps(outcome)
