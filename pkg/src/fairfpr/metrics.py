"""1:1 verification metrics per demographic group.

Conventions: a negative pair is a false positive when its similarity is
strictly above the threshold, a positive pair is a false negative when it is
strictly below. Equality counts as a correct decision.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_matrix, kth_largest, make_rng
from .thresholding import floor_rate_count

log = logging.getLogger(__name__)


@dataclass
class GroupedScores:
    pos_sims: np.ndarray
    pos_groups: np.ndarray
    neg_sims: np.ndarray
    neg_groups: np.ndarray
    group_set: list
    excluded: list = field(default_factory=list)  # (group, reason)
    # row indices of each sampled pair, when built from embeddings
    pos_pairs: np.ndarray = None
    neg_pairs: np.ndarray = None

    def __post_init__(self):
        self.pos_sims = np.asarray(self.pos_sims, dtype=np.float64)
        self.neg_sims = np.asarray(self.neg_sims, dtype=np.float64)
        self.pos_groups = np.asarray(self.pos_groups, dtype=object)
        self.neg_groups = np.asarray(self.neg_groups, dtype=object)
        self.group_set = list(self.group_set)

    @classmethod
    def from_pairs(cls, positives, negatives, group_set=None):
        """Build from lists of ``(similarity, group)`` tuples."""
        ps = [s for s, _ in positives]
        pg = [g for _, g in positives]
        ns = [s for s, _ in negatives]
        ng = [g for _, g in negatives]
        if group_set is None:
            group_set = sorted(set(pg) | set(ng))
        return cls(ps, pg, ns, ng, group_set)

    @property
    def n_pos(self):
        return self.pos_sims.size

    @property
    def n_neg(self):
        return self.neg_sims.size

    def positives(self, group=None):
        return self.pos_sims if group is None else self.pos_sims[self.pos_groups == group]

    def negatives(self, group=None):
        return self.neg_sims if group is None else self.neg_sims[self.neg_groups == group]


def _pair_indices(ids):
    a, b = np.triu_indices(len(ids), k=1)
    same = ids[a] == ids[b]
    return np.stack([a[same], b[same]], 1), np.stack([a[~same], b[~same]], 1)


def build_pairs(embeddings, identity_labels, group_labels, max_pairs_per_group=None, seed=0, balanced=True):
    """Within-group verification pairs with cosine similarities.

    Positive pairs share an identity, negative pairs are different
    identities of the same group. Each polarity is capped at
    ``max_pairs_per_group``; with ``balanced`` both polarities are further
    cut to the smaller of the two available counts, as in RFW-style
    protocols. Subsets are uniform draws without replacement. Groups with a
    single identity are excluded and recorded.
    """
    x = as_matrix(embeddings, "embeddings")
    ids = np.asarray(identity_labels)
    groups = np.asarray([str(g) for g in group_labels], dtype=object)
    if not (len(ids) == len(groups) == x.shape[0]):
        raise ValueError("embeddings, identity labels and group labels must align")
    rng = make_rng(seed, "pairs")
    pos_s, pos_g, neg_s, neg_g, pos_p, neg_p = [], [], [], [], [], []
    group_set, excluded = [], []
    for g in sorted(set(groups.tolist())):
        rows = np.flatnonzero(groups == g)
        if len(np.unique(ids[rows])) < 2:
            excluded.append((g, "fewer than two identities"))
            log.warning("group %r excluded from pairing: fewer than two identities", g)
            continue
        group_set.append(g)
        pos, neg = _pair_indices(ids[rows])
        cap = np.inf if max_pairs_per_group is None else int(max_pairs_per_group)
        if balanced:
            cap = min(cap, len(pos), len(neg))
        for pairs, s_out, g_out, p_out in ((pos, pos_s, pos_g, pos_p), (neg, neg_s, neg_g, neg_p)):
            if len(pairs) > cap:
                pick = np.sort(rng.choice(len(pairs), size=int(cap), replace=False))
                pairs = pairs[pick]
            a, b = rows[pairs[:, 0]], rows[pairs[:, 1]]
            s_out.append(np.einsum("ij,ij->i", x[a], x[b]))
            g_out.append(np.full(len(a), g, dtype=object))
            p_out.append(np.stack([a, b], 1))

    def cat(parts, dtype=np.float64, shape=(0,)):
        return np.concatenate(parts) if parts else np.zeros(shape, dtype=dtype)

    return GroupedScores(
        cat(pos_s), cat(pos_g, object), cat(neg_s), cat(neg_g, object), group_set, excluded,
        cat(pos_p, np.int64, (0, 2)), cat(neg_p, np.int64, (0, 2)),
    )


def fpr_at(scores, t, group=None):
    neg = scores.negatives(group)
    if neg.size == 0:
        raise ValueError(f"no negative pairs{'' if group is None else f' for group {group!r}'}")
    return np.count_nonzero(neg > t) / neg.size


def fnr_at(scores, t, group=None):
    pos = scores.positives(group)
    if pos.size == 0:
        raise ValueError(f"no positive pairs{'' if group is None else f' for group {group!r}'}")
    return np.count_nonzero(pos < t) / pos.size


def threshold_for_overall_fpr(scores, gamma):
    """Smallest threshold whose overall FPR does not exceed ``gamma``.

    With K = floor(gamma * N-) that is the (K+1)-th largest negative score.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    neg = scores.negatives()
    if neg.size == 0:
        raise ValueError("no negative pairs")
    return kth_largest(neg, floor_rate_count(gamma, neg.size) + 1)


def bias_degree_from_rates(group_fprs, overall_fpr):
    """(1/N_G) * sqrt(sum_g ((fpr_g - mean) / overall)^2)."""
    r = np.asarray(group_fprs, dtype=np.float64)
    if overall_fpr <= 0:
        raise ZeroDivisionError("overall FPR is zero; bias degree is undefined")
    return float(np.sqrt(np.sum(((r - r.mean()) / overall_fpr) ** 2)) / r.size)


def bias_groups(scores):
    return [g for g in scores.group_set if scores.negatives(g).size > 0]


def bias_degree_details(scores, gamma):
    groups = bias_groups(scores)
    if len(groups) < 2:
        raise ValueError(f"bias degree needs at least two groups with negative pairs, got {groups}")
    t = threshold_for_overall_fpr(scores, gamma)
    overall = fpr_at(scores, t)
    rates = {g: fpr_at(scores, t, g) for g in groups}
    if overall == 0:
        raise ZeroDivisionError(
            f"overall FPR is zero at t={t!r} for gamma={gamma} "
            f"({scores.n_neg} negatives are too few for this operating point)"
        )
    return {
        "threshold": t,
        "overall_fpr": overall,
        "group_fpr": rates,
        "bias_degree": bias_degree_from_rates(list(rates.values()), overall),
    }


def bias_degree(scores, gamma):
    return bias_degree_details(scores, gamma)["bias_degree"]


def roc(scores, group=None, points=101):
    """``points`` thresholds: one below every score, evenly spaced negative
    quantiles in between, one above every score. Ascending in threshold."""
    if points < 2:
        raise ValueError("points must be >= 2")
    pos, neg = scores.positives(group), scores.negatives(group)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs positive and negative pairs")
    both = np.concatenate([pos, neg])
    lo = np.nextafter(both.min(), -np.inf)
    hi = np.nextafter(both.max(), np.inf)
    inner = np.quantile(neg, np.linspace(0.0, 1.0, points)[1:-1]) if points > 2 else np.zeros(0)
    ts = np.concatenate([[lo], np.clip(inner, lo, hi), [hi]])
    return [(float(t), fpr_at(scores, t, group), 1.0 - fnr_at(scores, t, group)) for t in ts]


def verification_accuracy(scores, group=None):
    """Best accuracy over all distinct scores as thresholds; ties go to the smallest threshold."""
    pos, neg = np.sort(scores.positives(group)), np.sort(scores.negatives(group))
    if pos.size == 0 or neg.size == 0:
        raise ValueError("accuracy needs positive and negative pairs")
    cand = np.unique(np.concatenate([pos, neg]))
    correct = (pos.size - np.searchsorted(pos, cand, side="left")) + np.searchsorted(neg, cand, side="right")
    best = int(np.argmax(correct))
    return float(correct[best] / (pos.size + neg.size)), float(cand[best])


@dataclass
class FairnessReport:
    gammas: list
    groups: list
    thresholds: dict  # gamma -> t
    overall_fpr: dict
    overall_fnr: dict
    group_fpr: dict  # gamma -> {group: fpr}
    group_fnr: dict
    bias_degree: dict  # gamma -> delta, or None when undefined
    fpr_std: dict  # gamma -> population std of group FPRs (rate units)
    accuracy: dict  # group -> best-threshold accuracy
    accuracy_threshold: dict
    accuracy_mean: float
    accuracy_std: float
    roc: dict  # group -> [(t, fpr, tpr)]
    excluded: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def per_group(self):
        """group -> {'accuracy', 'fpr': {gamma: v}, 'fnr': {gamma: v}}."""
        return {
            g: {
                "accuracy": self.accuracy[g],
                "fpr": {gm: self.group_fpr[gm][g] for gm in self.gammas},
                "fnr": {gm: self.group_fnr[gm][g] for gm in self.gammas},
            }
            for g in self.groups
        }

    def to_dict(self):
        key = repr
        return {
            "gammas": list(self.gammas),
            "groups": list(self.groups),
            "per_group": {g: {"accuracy": v["accuracy"],
                              "fpr": {key(k): x for k, x in v["fpr"].items()},
                              "fnr": {key(k): x for k, x in v["fnr"].items()}}
                          for g, v in self.per_group().items()},
            "thresholds": {key(k): v for k, v in self.thresholds.items()},
            "overall_fpr": {key(k): v for k, v in self.overall_fpr.items()},
            "overall_fnr": {key(k): v for k, v in self.overall_fnr.items()},
            "bias_degree": {key(k): v for k, v in self.bias_degree.items()},
            "fpr_std": {key(k): v for k, v in self.fpr_std.items()},
            "fpr_std_percent": {key(k): 100.0 * v for k, v in self.fpr_std.items()},
            "accuracy_threshold": dict(self.accuracy_threshold),
            "accuracy_mean": self.accuracy_mean,
            "accuracy_std": self.accuracy_std,
            "roc": {g: [list(p) for p in pts] for g, pts in self.roc.items()},
            "excluded": [list(e) for e in self.excluded],
            "notes": list(self.notes),
        }


def fairness_report(scores, gammas, roc_points=101, strict=True, accuracy_scores=None):
    """Evaluate ``scores`` at every overall operating point in ``gammas``.

    With ``strict=False`` an undefined bias degree (overall FPR of zero) is
    stored as ``None`` with a note instead of raising. Verification accuracy
    is computed on ``accuracy_scores`` when given (typically a
    polarity-balanced subset of the same pairs), else on ``scores``.
    """
    acc_scores = scores if accuracy_scores is None else accuracy_scores
    groups = [g for g in scores.group_set if scores.negatives(g).size and scores.positives(g).size]
    if len(groups) < 2:
        raise ValueError(f"fairness report needs at least two groups with pairs, got {groups}")
    rep = FairnessReport(list(gammas), groups, {}, {}, {}, {}, {}, {}, {}, {}, {}, 0.0, 0.0, {},
                         excluded=list(scores.excluded))
    for gm in gammas:
        t = threshold_for_overall_fpr(scores, gm)
        rep.thresholds[gm] = t
        rep.overall_fpr[gm] = fpr_at(scores, t)
        rep.overall_fnr[gm] = fnr_at(scores, t)
        rep.group_fpr[gm] = {g: fpr_at(scores, t, g) for g in groups}
        rep.group_fnr[gm] = {g: fnr_at(scores, t, g) for g in groups}
        rep.fpr_std[gm] = float(np.std(list(rep.group_fpr[gm].values())))
        try:
            rep.bias_degree[gm] = bias_degree(scores, gm)
        except ZeroDivisionError as e:
            if strict:
                raise
            rep.bias_degree[gm] = None
            rep.notes.append(f"gamma={gm!r}: {e}")
    for g in groups:
        rep.accuracy[g], rep.accuracy_threshold[g] = verification_accuracy(acc_scores, g)
        rep.roc[g] = roc(scores, g, roc_points)
    accs = np.array([rep.accuracy[g] for g in groups])
    rep.accuracy_mean = float(accs.mean())
    rep.accuracy_std = float(accs.std())
    return rep


def write_report(report, out_dir):
    """``report.json`` plus one ``roc-<group>.csv`` per group."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    for g, pts in report.roc.items():
        p = out / f"roc-{g}.csv"
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fpr", "tpr"])
            for t, f, tp in pts:
                w.writerow(["%.17g" % t, "%.17g" % f, "%.17g" % tp])
        paths.append(p)
    return paths
