"""The eight acceptance criteria, each at its stated tolerance and budget.

Every test records a one-line verdict that the pytest terminal summary
prints under "acceptance criteria". Criteria 5 to 7 train real models on the
default benchmark and take a couple of minutes in total.
"""

import csv
import json
import time

import numpy as np
import pytest

import gradcheck as gc
import metric_oracles as oracle
from conftest import ACCEPTANCE
from fairfpr import cli
from fairfpr import encoder as enc
from fairfpr import losses as L
from fairfpr import metrics as M
from fairfpr import synthdata as sd
from fairfpr import trainer as T
from fairfpr.thresholding import estimate_threshold, threshold_from_pool

SEEDS = (0, 1, 2)
GAMMAS = (1e-2, 1e-1)


def record(num, title, ok, detail):
    ACCEPTANCE.append((num, title, bool(ok), detail))


# -- 1 ---------------------------------------------------------------------

def test_criterion_1_gradients():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst, where = 0.0, None
    for kind in L.KINDS:
        for p in (1, 2, 3):
            for _ in range(2):
                errs = gc.full_chain_errors(rng, kind, p)
                k = max(errs, key=errs.get)
                if errs[k] > worst:
                    worst, where = errs[k], f"{kind} p={p} {k}"
    elapsed = time.perf_counter() - start
    ok = worst < 1e-5 and elapsed < 30
    record(1, "gradient correctness", ok, f"max rel err {worst:.2e} ({where}), {elapsed:.1f}s")
    assert worst < 1e-5, where
    assert elapsed < 30


# -- 2 ---------------------------------------------------------------------

def test_criterion_2_alpha_zero_reduction():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        cfg, params, w, x, y = gc.random_case(rng, L.COSFACE, 2)
        pen = L.LossConfig(kind=L.PENALTY_COSFACE, s=cfg.s, m=cfg.m, alpha=0.0, p=2.0, gamma_u=0.05)
        tr = enc.forward(params, x)
        batch = L.cosine_logits(tr.embedding, L.normalize_columns(w)[0], y)
        outs = []
        for c, t in ((cfg, None), (pen, estimate_threshold(batch, pen.gamma_u))):
            o = L.loss_forward(batch, c, t)
            gw, gx = L.classifier_grads(tr.embedding, w, o.grad_wrt_cosines)
            (gws, gbs), _ = enc.backward(params, tr, gx)
            outs.append([np.array([o.loss]), o.grad_wrt_cosines, gw, *gws, *gbs])
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(*outs)))
    elapsed = time.perf_counter() - start
    record(2, "alpha=0 reduction", worst <= 1e-12 and elapsed < 5, f"max abs diff {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-12
    assert elapsed < 5


# -- 3 ---------------------------------------------------------------------

def test_criterion_3_threshold_exactness():
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    bad = 0
    for i in range(1000):
        n = int(np.exp(rng.uniform(0, np.log(1e5))))
        if i < 5:
            n = 100_000
        pool = rng.uniform(-1, 1, n)
        if i % 3 == 0:
            pool = np.round(pool, 2)  # heavy ties
        gamma = float(10.0 ** -rng.integers(1, 6))
        est = threshold_from_pool(pool, gamma)
        k = min(max(int(np.ceil(round(gamma * n, 9))), 1), n)
        t = np.sort(pool)[::-1][k - 1]
        if est.t_u != t or est.realized_fpr > gamma + 1.0 / n:
            bad += 1
    elapsed = time.perf_counter() - start
    record(3, "threshold exactness", bad == 0 and elapsed < 20, f"{bad} mismatches over 1000 pools, {elapsed:.1f}s")
    assert bad == 0
    assert elapsed < 20


# -- 4 ---------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(200):
        pos, neg, groups, sc = oracle.random_scores(rng, 2000)
        g = groups[int(rng.integers(len(groups)))]
        t = float(rng.uniform(-0.5, 1.0))
        worst = max(worst, abs(M.fpr_at(sc, t) - oracle.fpr(neg, t)), abs(M.fnr_at(sc, t, g) - oracle.fnr(pos, t, g)))
        a, at = M.verification_accuracy(sc, g)
        b, bt = oracle.accuracy_scan(pos, neg, g)
        worst = max(worst, abs(a - b), abs(at - bt))
        for tt, f, tp in M.roc(sc, g, points=21):
            worst = max(worst, abs(f - oracle.fpr(neg, tt, g)), abs(tp - (1 - oracle.fnr(pos, tt, g))))
        for gm in GAMMAS:
            try:
                expect = oracle.bias_degree(pos, neg, groups, gm)
            except ZeroDivisionError:
                with pytest.raises(ZeroDivisionError):
                    M.bias_degree(sc, gm)
                continue
            worst = max(worst, abs(M.bias_degree(sc, gm) - expect))
    hand = M.bias_degree_from_rates([0.02, 0.0], 0.01)
    ok = worst <= 1e-12 and abs(hand - 0.7071) < 5e-5
    record(4, "metric oracles", ok, f"max abs diff {worst:.1e} over 200 instances, hand example {hand:.4f}")
    assert worst <= 1e-12
    assert round(hand, 4) == 0.7071


# -- 5 and 6 share the paired benchmark runs -------------------------------

@pytest.fixture(scope="module")
def paired_runs():
    runs = {}
    for seed in SEEDS:
        d = sd.generate(sd.default_specs(), 32, seed)
        tr, ev = sd.split(d, sd.BENCHMARK_HOLDOUT, seed)
        for kind in (L.COSFACE, L.PENALTY_COSFACE):
            start = time.perf_counter()
            st, rec = T.train(tr, T.benchmark_config(kind, seed))
            train_s = time.perf_counter() - start
            rep = T.evaluate(st, ev, list(GAMMAS))
            runs[seed, kind] = {"summary": T.epoch_summary(rec), "report": rep, "train_s": train_s,
                                "n_train": tr.num_samples, "c_train": tr.num_classes}
    return runs


@pytest.mark.slow
def test_criterion_5_instance_fpr_consistency(paired_runs):
    wins, parts = 0, []
    for seed in SEEDS:
        b = paired_runs[seed, L.COSFACE]["summary"]
        p = paired_runs[seed, L.PENALTY_COSFACE]["summary"]
        ok = p["instance_fpr_std"] < b["instance_fpr_std"] and p["group_fpr_std"] < b["group_fpr_std"]
        wins += ok
        parts.append(f"seed {seed}: inst {p['instance_fpr_std']:.5f} vs {b['instance_fpr_std']:.5f}, "
                     f"group {p['group_fpr_std']:.5f} vs {b['group_fpr_std']:.5f}")
    slowest = max(r["train_s"] for r in paired_runs.values())
    shape = paired_runs[0, L.COSFACE]
    record(5, "instance-FPR consistency", wins == 3 and slowest < 180,
           f"{wins}/3 seeds (penalty vs cosface) [{'; '.join(parts)}], "
           f"{shape['c_train']} identities / {shape['n_train']} samples, slowest run {slowest:.1f}s")
    assert shape["c_train"] == 128 and shape["n_train"] == 2048
    assert slowest < 180
    assert wins == 3


@pytest.mark.slow
def test_criterion_6_bias_degree_reduction(paired_runs):
    wins, parts, worst_drop = 0, [], 0.0
    for seed in SEEDS:
        b = paired_runs[seed, L.COSFACE]["report"]
        p = paired_runs[seed, L.PENALTY_COSFACE]["report"]
        lower = all(p.bias_degree[g] is not None and b.bias_degree[g] is not None
                    and p.bias_degree[g] < b.bias_degree[g] for g in GAMMAS)
        wins += lower
        worst_drop = max(worst_drop, b.accuracy_mean - p.accuracy_mean)
        parts.append(f"seed {seed}: d@1e-2 {p.bias_degree[1e-2]:.3f} vs {b.bias_degree[1e-2]:.3f}, "
                     f"d@1e-1 {p.bias_degree[1e-1]:.3f} vs {b.bias_degree[1e-1]:.3f}")
    ok = wins == 3 and worst_drop <= 0.01
    record(6, "bias-degree reduction", ok,
           f"{wins}/3 seeds lower at both levels, worst accuracy drop {100 * worst_drop:.2f}pp [{'; '.join(parts)}]")
    assert worst_drop <= 0.01
    assert wins == 3


# -- 7 ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    assert cli.main(["generate", "--out", str(root / "gen"), "--seed", "0"]) == 0
    base = T.benchmark_config(L.PENALTY_COSFACE, 0).to_dict()
    (root / "base.json").write_text(json.dumps(base))
    return root


@pytest.mark.slow
def test_criterion_7_ablation_sweeps(benchmark_dir):
    root = benchmark_dir
    gen = root / "gen"
    problems = []
    cells = 0
    for axis, values in (("gamma_u", (1e-1, 1e-2, 1e-3)), ("p", (1.0, 2.0, 3.0))):
        out = root / f"sweep-{axis}"
        code = cli.main(["sweep", "--config", str(root / "base.json"), "--dataset", str(gen / "train"),
                         "--eval-dataset", str(gen / "eval"), "--axis", axis,
                         "--values", ",".join(repr(v) for v in values), "--gammas", "0.01,0.1", "--out", str(out)])
        if code != 0:
            problems.append(f"{axis} sweep exit {code}")
            continue
        with open(out / "summary.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        header = ["value", "acc_a", "acc_b", "acc_c", "acc_d", "avg", "std", "delta@0.01", "delta@0.1", "error"]
        if rows[0] != header or len(rows) != 1 + len(values) or any(len(r) != len(header) for r in rows):
            problems.append(f"{axis} summary malformed")
            continue
        base = json.loads((root / "base.json").read_text())
        for v, row in zip(values, rows[1:]):
            single = root / f"single-{axis}-{v!r}"
            cfg = json.loads(json.dumps(base))
            cfg["loss"][axis] = v
            (root / "cfg.json").write_text(json.dumps(cfg))
            cli.main(["train", "--config", str(root / "cfg.json"), "--dataset", str(gen / "train"), "--out", str(single)])
            cli.main(["evaluate", "--checkpoint", str(single), "--dataset", str(gen / "eval"), "--gammas", "0.01,0.1",
                      "--out", str(single / "ev")])
            rep = json.loads((single / "ev" / "report.json").read_text())
            expect = [repr(v)] + [repr(rep["per_group"][g]["accuracy"]) for g in "abcd"] + \
                     [repr(rep["accuracy_mean"]), repr(rep["accuracy_std"]),
                      repr(rep["bias_degree"]["0.01"]), repr(rep["bias_degree"]["0.1"]), ""]
            child = out / f"{axis}={v!r}"
            same_ckpt = (child / "checkpoint.csv").read_bytes() == (single / "checkpoint.csv").read_bytes()
            cells += 1
            if row != expect or not same_ckpt:
                problems.append(f"{axis}={v!r} differs from the single run")
    record(7, "ablation sweeps", not problems, f"{cells} cells cross-checked exactly" + (f"; {problems}" if problems else ""))
    assert not problems


# -- 8 ---------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(benchmark_dir, tmp_path):
    root = benchmark_dir
    gen = root / "gen"
    cfg = dict(T.benchmark_config(L.PENALTY_COSFACE, 3).to_dict(), epochs=5)
    (tmp_path / "t.json").write_text(json.dumps(cfg))
    train_dir, eval_dir = tmp_path / "train", tmp_path / "eval"
    cli.main(["train", "--config", str(tmp_path / "t.json"), "--dataset", str(gen / "train"), "--out", str(train_dir)])
    cli.main(["evaluate", "--checkpoint", str(train_dir), "--dataset", str(gen / "eval"), "--out", str(eval_dir)])
    mismatched = []
    for name, run_dir in (("generate", gen), ("train", train_dir), ("evaluate", eval_dir),
                          ("sweep", root / "sweep-p")):
        if not (run_dir / "manifest.json").exists():
            mismatched.append(f"{name}: no manifest")
            continue
        again = tmp_path / f"replay-{name}"
        code = cli.replay(run_dir / "manifest.json", again)
        a = json.loads((run_dir / "manifest.json").read_text())["outputs"]
        b = json.loads((again / "manifest.json").read_text())["outputs"] if code == 0 else {}
        if code != 0 or a != b:
            mismatched.append(name)
    tel = json.loads((train_dir / "manifest.json").read_text())["outputs"]
    detail = f"replayed generate/train/evaluate/sweep manifests, telemetry {tel['telemetry.ndjson'][:12]}, " \
             f"checkpoint {tel['checkpoint.csv'][:12]}"
    record(8, "determinism", not mismatched, detail + (f"; mismatched {mismatched}" if mismatched else ""))
    assert not mismatched
