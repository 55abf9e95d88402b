import logging

import numpy as np
import pytest

from fairfpr import metrics as M
from fairfpr.metrics import GroupedScores

import metric_oracles as oracle


def scores(pos, neg, group="g"):
    return GroupedScores.from_pairs([(s, group) for s in pos], [(s, group) for s in neg])


def test_fpr_fnr_hand_cases():
    sc = scores([0.9, 0.5], [0.4, 0.2, 0.35])
    assert M.fpr_at(sc, 0.31) == pytest.approx(2 / 3)
    assert M.fpr_at(sc, 1.0) == 0.0
    assert M.fnr_at(sc, 0.7) == 0.5
    assert M.fnr_at(sc, -1.0) == 0.0


def test_equality_is_correct_decision():
    sc = scores([0.5], [0.5])
    assert M.fpr_at(sc, 0.5) == 0.0 and M.fnr_at(sc, 0.5) == 0.0


def test_empty_sets_raise():
    sc = scores([0.9], [0.1], "a")
    with pytest.raises(ValueError):
        M.fpr_at(sc, 0.0, group="b")
    with pytest.raises(ValueError):
        M.fnr_at(sc, 0.0, group="b")


def test_threshold_order_statistic():
    neg = [0.95, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
    sc = scores([0.99], neg)
    t = M.threshold_for_overall_fpr(sc, 0.2)
    # smallest t with fpr(t) <= 0.2 is the third largest: two negatives above it
    assert t == 0.8
    assert M.fpr_at(sc, t) == 0.2
    assert M.fpr_at(sc, np.nextafter(t, -1)) > 0.2


def test_threshold_boundary_returns_minimum():
    neg = [0.5, 0.4, 0.3, 0.2]
    assert M.threshold_for_overall_fpr(scores([0.9], neg), 0.75) == 0.2
    assert M.threshold_for_overall_fpr(scores([0.9], neg), 0.99) == 0.2


def test_threshold_rejects_bad_gamma():
    with pytest.raises(ValueError):
        M.threshold_for_overall_fpr(scores([0.9], [0.1]), 1.0)


def test_bias_degree_hand_example():
    assert M.bias_degree_from_rates([0.02, 0.0], 0.01) == pytest.approx(0.7071, abs=1e-4)
    assert M.bias_degree_from_rates([0.02, 0.0], 0.01) == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    # the same configuration realised from scores: 100 negatives per group,
    # two of group a above the threshold and none of group b
    neg = [(0.9, "a"), (0.8, "a")] + [(0.1, "a")] * 98 + [(0.5, "b")] + [(0.0, "b")] * 99
    sc = GroupedScores.from_pairs([(0.95, "a"), (0.95, "b")], neg)
    det = M.bias_degree_details(sc, 0.01)
    assert det["overall_fpr"] == 0.01
    assert det["group_fpr"] == {"a": 0.02, "b": 0.0}
    assert det["bias_degree"] == pytest.approx(0.7071, abs=1e-4)


def test_bias_degree_equal_groups_is_zero():
    neg = [(v, g) for g in "ab" for v in (0.1, 0.2, 0.3, 0.4)]
    sc = GroupedScores.from_pairs([(0.9, "a"), (0.9, "b")], neg)
    assert M.bias_degree(sc, 0.25) == 0.0


def test_bias_degree_zero_overall_fpr():
    sc = scores([0.9], [0.1, 0.2, 0.3])
    sc2 = GroupedScores.from_pairs([(0.9, "a")], [(0.1, "a"), (0.2, "b")])
    with pytest.raises(ZeroDivisionError, match="overall FPR is zero"):
        M.bias_degree(sc2, 0.01)
    with pytest.raises(ValueError, match="two groups"):
        M.bias_degree(sc, 0.5)


def test_bias_degree_group_degeneration():
    # identical score multisets for every group means identical group FPRs
    rng = np.random.default_rng(0)
    base = rng.uniform(-1, 1, 50).tolist()
    neg = [(v, g) for g in "abc" for v in base]
    sc = GroupedScores.from_pairs([(0.99, g) for g in "abc"], neg)
    for gamma in (0.02, 0.1, 0.3):
        assert M.bias_degree(sc, gamma) == pytest.approx(0.0, abs=1e-15)


def test_roc_endpoints_and_monotone(rng):
    _, _, groups, sc = oracle.random_scores(rng, 400)
    pts = M.roc(sc, groups[0], points=21)
    assert len(pts) == 21
    assert pts[0][1:] == (1.0, 1.0)
    assert pts[-1][1:] == (0.0, 0.0)
    ts = [p[0] for p in pts]
    assert ts == sorted(ts)
    fprs = [p[1] for p in pts]
    assert all(a >= b for a, b in zip(fprs, fprs[1:]))


def test_accuracy_trivial_cases():
    assert M.verification_accuracy(scores([0.8, 0.9], [0.1, 0.2]))[0] == 1.0
    same = [0.1, 0.2, 0.3, 0.4]
    acc, _ = M.verification_accuracy(scores(same, same))
    assert abs(acc - 0.5) <= 1.0 / 8 + 1e-12


def test_random_instances_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(30):
        pos, neg, groups, sc = oracle.random_scores(rng, 300)
        for t in rng.uniform(-1, 1, 3).tolist() + [neg[0][0]]:
            assert M.fpr_at(sc, t) == oracle.fpr(neg, t)
            assert M.fnr_at(sc, t) == oracle.fnr(pos, t)
            g = groups[-1]
            assert M.fpr_at(sc, t, g) == oracle.fpr(neg, t, g)
        for gamma in (0.01, 0.1, 0.5):
            assert M.threshold_for_overall_fpr(sc, gamma) == oracle.threshold_scan(neg, gamma)
        g = groups[0]
        assert M.verification_accuracy(sc, g) == oracle.accuracy_scan(pos, neg, g)
        for t, f, tp in M.roc(sc, g, points=11):
            assert f == oracle.fpr(neg, t, g) and tp == 1.0 - oracle.fnr(pos, t, g)
        try:
            expect = oracle.bias_degree(pos, neg, groups, 0.1)
        except ZeroDivisionError:
            continue
        assert abs(M.bias_degree(sc, 0.1) - expect) <= 1e-12


def enumerate_pairs(ids, groups):
    pos, neg = set(), set()
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if groups[i] != groups[j]:
                continue
            (pos if ids[i] == ids[j] else neg).add((i, j))
    return pos, neg


def test_build_pairs_small_enumeration():
    emb = np.eye(4)
    sc = M.build_pairs(emb, [0, 0, 1, 1], ["g"] * 4, max_pairs_per_group=2, seed=0, balanced=False)
    assert sc.n_pos == 2 and sc.n_neg == 2


def test_build_pairs_identical_embeddings():
    emb = np.array([[0.6, 0.8], [0.6, 0.8], [1.0, 0.0], [0.0, 1.0]])
    sc = M.build_pairs(emb, [0, 0, 1, 1], ["g"] * 4)
    assert 1.0 in sc.pos_sims.tolist()


@pytest.mark.parametrize("balanced", [True, False])
@pytest.mark.parametrize("seed", range(5))
def test_build_pairs_subset_of_exhaustive(seed, balanced):
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(6), 3)
    groups = ["a" if y < 3 else "b" for y in ids]
    emb = rng.standard_normal((18, 4))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    sc = M.build_pairs(emb, ids, groups, max_pairs_per_group=5, seed=seed, balanced=balanced)
    pos, neg = enumerate_pairs(ids.tolist(), groups)
    got_pos = {tuple(p) for p in sc.pos_pairs.tolist()}
    got_neg = {tuple(p) for p in sc.neg_pairs.tolist()}
    assert got_pos <= pos and got_neg <= neg
    assert len(got_pos) == sc.n_pos and len(got_neg) == sc.n_neg
    for (i, j), s in zip(sc.pos_pairs.tolist(), sc.pos_sims):
        assert s == pytest.approx(float(emb[i] @ emb[j]), abs=1e-15)
    assert sc.n_pos == sc.n_neg == 10  # capped at 5 per group and polarity


def test_build_pairs_is_deterministic(rng):
    emb = rng.standard_normal((30, 3))
    ids = np.repeat(np.arange(10), 3)
    g = ["a"] * 15 + ["b"] * 15
    a = M.build_pairs(emb, ids, g, 7, seed=3)
    b = M.build_pairs(emb, ids, g, 7, seed=3)
    assert np.array_equal(a.neg_pairs, b.neg_pairs) and np.array_equal(a.pos_sims, b.pos_sims)


def test_single_identity_group_is_excluded(caplog):
    emb = np.eye(6)[:, :6]
    with caplog.at_level(logging.WARNING):
        sc = M.build_pairs(emb, [0, 0, 1, 1, 2, 2], ["a", "a", "a", "a", "b", "b"])
    assert sc.group_set == ["a"]
    assert sc.excluded and sc.excluded[0][0] == "b"
    assert "excluded" in caplog.text


def test_fairness_report_fields(rng):
    pos, neg, groups, sc = oracle.random_scores(rng, 1500)
    rep = M.fairness_report(sc, [0.05, 0.2], roc_points=5, strict=False)
    assert rep.groups == groups
    for gm in (0.05, 0.2):
        assert set(rep.group_fpr[gm]) == set(groups)
        assert all(0.0 <= v <= 1.0 for v in rep.group_fpr[gm].values())
        if rep.bias_degree[gm] is not None:
            assert rep.bias_degree[gm] >= 0.0
            assert rep.bias_degree[gm] == pytest.approx(oracle.bias_degree(pos, neg, groups, gm), abs=1e-12)
    accs = [rep.accuracy[g] for g in groups]
    assert rep.accuracy_mean == pytest.approx(np.mean(accs))
    assert rep.accuracy_std == pytest.approx(np.std(accs))


def test_fairness_report_needs_two_groups():
    with pytest.raises(ValueError, match="two groups"):
        M.fairness_report(scores([0.9], [0.1]), [0.5])


def test_write_report(tmp_path, rng):
    _, _, groups, sc = oracle.random_scores(rng, 300)
    rep = M.fairness_report(sc, [0.1], roc_points=4, strict=False)
    paths = M.write_report(rep, tmp_path)
    assert (tmp_path / "report.json").exists()
    assert len(paths) == 1 + len(groups)
    lines = (tmp_path / f"roc-{groups[0]}.csv").read_text().splitlines()
    assert lines[0] == "threshold,fpr,tpr" and len(lines) == 5
