"""Synthetic identity datasets whose demographic groups differ in hardness.

Each group gets a random anchor direction. Identity centers sit at
``anchor + center_concentration * u`` with ``u`` uniform on the unit sphere,
and samples are ``center + N(0, intra_spread^2 I)`` projected back onto the
sphere. A small ``center_concentration`` packs a group's identities close
together, so its negative pairs look alike and it suffers more false
positives at any shared threshold.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import l2_normalize_rows, make_rng

FORMAT_NAME = "fairfpr-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    """Raised when a dataset file pair cannot be parsed."""


@dataclass(frozen=True)
class GroupSpec:
    group_id: str
    identity_count: int
    samples_per_identity: int
    intra_spread: float
    center_concentration: float

    def validate(self):
        if self.identity_count < 2:
            raise ValueError(f"group {self.group_id!r}: identity_count must be >= 2")
        if self.samples_per_identity < 2:
            raise ValueError(f"group {self.group_id!r}: samples_per_identity must be >= 2")
        if not self.intra_spread > 0:
            raise ValueError(f"group {self.group_id!r}: intra_spread must be > 0")
        if not self.center_concentration > 0:
            raise ValueError(f"group {self.group_id!r}: center_concentration must be > 0")

    @classmethod
    def from_dict(cls, d):
        return cls(
            group_id=str(d["group_id"]),
            identity_count=int(d["identity_count"]),
            samples_per_identity=int(d["samples_per_identity"]),
            intra_spread=float(d["intra_spread"]),
            center_concentration=float(d["center_concentration"]),
        )


DEFAULT_INTRA_SPREAD = 0.02
# Benchmark layout: 64 identities per group, half of them held out, leaves
# 128 training identities (2,048 samples) and 128 evaluation identities.
BENCHMARK_IDENTITIES = 64
BENCHMARK_HOLDOUT = 32


def default_specs(identities_per_group=BENCHMARK_IDENTITIES, samples_per_identity=16, intra_spread=DEFAULT_INTRA_SPREAD):
    """The four-group benchmark: concentrations 0.3, 0.5, 0.8, 1.2 for groups a..d."""
    return [
        GroupSpec(g, identities_per_group, samples_per_identity, intra_spread, c)
        for g, c in zip("abcd", (0.3, 0.5, 0.8, 1.2))
    ]


@dataclass
class Dataset:
    features: np.ndarray
    identity_labels: np.ndarray
    group_labels: list
    spec: list
    seed: int
    # original identity index of each class; lets splits stay traceable
    # after class indices are compacted
    source_identities: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D array")
        self.identity_labels = np.asarray(self.identity_labels, dtype=np.int64)
        self.group_labels = [str(g) for g in self.group_labels]
        if self.source_identities is None:
            self.source_identities = np.arange(self.num_classes, dtype=np.int64)
        self.source_identities = np.asarray(self.source_identities, dtype=np.int64)
        n = self.features.shape[0]
        if len(self.identity_labels) != n or len(self.group_labels) != n:
            raise ValueError("features, identity_labels and group_labels must have equal length")

    @property
    def num_samples(self):
        return self.features.shape[0]

    @property
    def num_classes(self):
        return int(self.identity_labels.max()) + 1 if len(self.identity_labels) else 0

    @property
    def raw_dim(self):
        return self.features.shape[1]

    @property
    def groups(self):
        """Group labels in first-appearance order."""
        return list(dict.fromkeys(self.group_labels))

    def class_groups(self):
        """Group label of every class index."""
        out = [None] * self.num_classes
        for y, g in zip(self.identity_labels, self.group_labels):
            out[y] = g
        return out

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.identity_labels, other.identity_labels)
            and self.group_labels == other.group_labels
            and list(self.spec) == list(other.spec)
            and int(self.seed) == int(other.seed)
            and np.array_equal(self.source_identities, other.source_identities)
        )


def generate(specs, raw_dim, seed):
    if not specs:
        raise ValueError("at least one GroupSpec is required")
    if raw_dim < 4:
        raise ValueError("raw_dim must be >= 4")
    for s in specs:
        s.validate()
    if len({s.group_id for s in specs}) != len(specs):
        raise ValueError("group ids must be unique")

    rng = make_rng(seed, "data")
    feats, ids, groups = [], [], []
    next_class = 0
    for s in specs:
        anchor = rng.standard_normal(raw_dim)
        anchor /= np.linalg.norm(anchor)
        offsets = l2_normalize_rows(rng.standard_normal((s.identity_count, raw_dim)))
        centers = anchor + s.center_concentration * offsets
        for c in centers:
            noise = rng.standard_normal((s.samples_per_identity, raw_dim)) * s.intra_spread
            feats.append(l2_normalize_rows(c + noise))
            ids.extend([next_class] * s.samples_per_identity)
            groups.extend([s.group_id] * s.samples_per_identity)
            next_class += 1
    return Dataset(np.vstack(feats), np.array(ids), groups, list(specs), int(seed))


def subset(d, rows):
    """Dataset restricted to ``rows``, with class indices compacted to 0..c'-1."""
    rows = np.asarray(rows, dtype=np.int64)
    old = d.identity_labels[rows]
    kept = np.unique(old)
    remap = {int(c): i for i, c in enumerate(kept)}
    new_ids = np.array([remap[int(c)] for c in old], dtype=np.int64)
    return Dataset(
        d.features[rows].reshape(len(rows), d.raw_dim),
        new_ids,
        [d.group_labels[i] for i in rows],
        list(d.spec),
        d.seed,
        source_identities=d.source_identities[kept] if len(kept) else np.zeros(0, dtype=np.int64),
    )


def split(d, holdout_identities_per_group, seed):
    """Hold out whole identities per group; returns ``(train, eval)``."""
    h = int(holdout_identities_per_group)
    if h < 0:
        raise ValueError("holdout must be >= 0")
    if h == 0:
        return d, subset(d, [])
    rng = make_rng(seed, "split")
    cls_group = d.class_groups()
    held = set()
    for g in d.groups:
        members = [c for c, cg in enumerate(cls_group) if cg == g]
        if len(members) <= h:
            raise ValueError(f"group {g!r} has {len(members)} identities, cannot hold out {h}")
        held.update(int(c) for c in rng.choice(members, size=h, replace=False))
    is_eval = np.array([int(y) in held for y in d.identity_labels])
    return subset(d, np.flatnonzero(~is_eval)), subset(d, np.flatnonzero(is_eval))


def mean_nontarget_cosine(d, group):
    """Mean cosine over sample pairs of different identities within ``group``."""
    rows = np.array([g == group for g in d.group_labels])
    x = d.features[rows]
    y = d.identity_labels[rows]
    sims = x @ x.T
    diff = y[:, None] != y[None, :]
    return float(sims[diff].mean())


def _paths(path):
    p = Path(path)
    name = p.name
    for suffix in (".header.json", ".features.csv"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return p.with_name(name + ".header.json"), p.with_name(name + ".features.csv")


def save(d, path):
    """Write ``<path>.header.json`` and ``<path>.features.csv``."""
    header_path, csv_path = _paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": int(d.seed),
        "num_samples": d.num_samples,
        "raw_dim": d.raw_dim,
        "num_classes": d.num_classes,
        "groups": d.groups,
        "source_identities": [int(i) for i in d.source_identities],
        "spec": [asdict(s) for s in d.spec],
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["identity_label", "group_label"] + [f"f{j}" for j in range(d.raw_dim)])
        for y, g, row in zip(d.identity_labels, d.group_labels, d.features):
            w.writerow([int(y), g] + ["%.17g" % v for v in row])
    return header_path, csv_path


def load(path):
    header_path, csv_path = _paths(path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{header_path}: line {e.lineno}: {e.msg}") from e
    for key in ("format", "seed", "num_samples", "raw_dim", "spec"):
        if key not in header:
            raise DatasetFormatError(f"{header_path}: missing field {key!r}")
    if header["format"] != FORMAT_NAME:
        raise DatasetFormatError(f"{header_path}: field 'format' is {header['format']!r}")
    dim = int(header["raw_dim"])
    n = int(header["num_samples"])

    ids, groups, feats = [], [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        cols = next(reader, None)
        expected = ["identity_label", "group_label"] + [f"f{j}" for j in range(dim)]
        if cols != expected:
            raise DatasetFormatError(f"{csv_path}: line 1: header columns do not match raw_dim={dim}")
        for row in reader:
            line = reader.line_num
            if len(row) != dim + 2:
                raise DatasetFormatError(f"{csv_path}: line {line}: expected {dim + 2} fields, got {len(row)}")
            try:
                ids.append(int(row[0]))
            except ValueError:
                raise DatasetFormatError(f"{csv_path}: line {line}: field 'identity_label' is not an integer") from None
            groups.append(row[1])
            vals = []
            for j, tok in enumerate(row[2:]):
                try:
                    vals.append(float(tok))
                except ValueError:
                    raise DatasetFormatError(f"{csv_path}: line {line}: field 'f{j}' is not a number") from None
            feats.append(vals)
    if len(ids) != n:
        raise DatasetFormatError(f"{csv_path}: expected {n} rows, found {len(ids)} (truncated?)")
    specs = [GroupSpec.from_dict(s) for s in header["spec"]]
    features = np.array(feats, dtype=np.float64).reshape(n, dim)
    return Dataset(features, np.array(ids, dtype=np.int64), groups, specs, int(header["seed"]),
                   source_identities=header.get("source_identities"))
