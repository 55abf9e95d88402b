"""Feed-forward embedding network with hand-written backward pass.

Layers are ``h = relu(h @ W + b)`` with a linear last layer, followed by
row-wise L2 normalisation. Scaling by ``s`` happens in the loss.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_matrix, make_rng


@dataclass
class EncoderParams:
    layer_weights: list  # each (fan_in, fan_out)
    layer_biases: list  # each (fan_out,)
    embed_dim: int
    hidden_activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_weights) != len(self.layer_biases) or not self.layer_weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.layer_weights, self.layer_biases)):
            if w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: bias length {b.shape[0]} != fan_out {w.shape[1]}")
            if i and self.layer_weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: fan_in does not match previous layer")
        if self.layer_weights[-1].shape[1] != self.embed_dim:
            raise ValueError("last layer must output embed_dim")
        if self.hidden_activation != "relu":
            raise ValueError("only the 'relu' activation is supported")

    @property
    def raw_dim(self):
        return self.layer_weights[0].shape[0]

    @property
    def hidden_dims(self):
        return [w.shape[1] for w in self.layer_weights[:-1]]

    def copy(self):
        return EncoderParams([w.copy() for w in self.layer_weights],
                             [b.copy() for b in self.layer_biases], self.embed_dim, self.hidden_activation)

    def __eq__(self, other):
        if not isinstance(other, EncoderParams):
            return NotImplemented
        return (
            self.embed_dim == other.embed_dim
            and len(self.layer_weights) == len(other.layer_weights)
            and all(np.array_equal(a, b) for a, b in zip(self.layer_weights, other.layer_weights))
            and all(np.array_equal(a, b) for a, b in zip(self.layer_biases, other.layer_biases))
        )


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre_activations: list = field(default_factory=list)
    activations: list = field(default_factory=list)  # input to each layer
    raw_embedding: np.ndarray = None
    norms: np.ndarray = None
    embedding: np.ndarray = None


def init(raw_dim, hidden_dims, embed_dim, seed):
    """He-normal weights (std = sqrt(2 / fan_in)), zero biases."""
    dims = [int(raw_dim), *[int(h) for h in hidden_dims], int(embed_dim)]
    if min(dims) < 1:
        raise ValueError("all layer dims must be >= 1")
    rng = make_rng(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights, biases, int(embed_dim))


def forward(p, batch_features):
    x = as_matrix(batch_features, "batch_features")
    if x.shape[1] != p.raw_dim:
        raise ValueError(f"batch has {x.shape[1]} columns, encoder expects {p.raw_dim}")
    tr = ForwardTrace(inputs=x)
    h = x
    last = len(p.layer_weights) - 1
    for i, (w, b) in enumerate(zip(p.layer_weights, p.layer_biases)):
        tr.activations.append(h)
        z = h @ w + b
        tr.pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise FloatingPointError("degenerate embedding (zero or non-finite norm) before normalisation")
    tr.raw_embedding = h
    tr.norms = norms
    tr.embedding = h / norms
    return tr


def normalize_backward(u, norms, grad_u):
    """Backprop through v -> v/||v||: (I - u u^T) g / ||v|| row-wise."""
    radial = np.sum(grad_u * u, axis=1, keepdims=True)
    return (grad_u - radial * u) / norms


def backward(p, trace, grad_wrt_embedding):
    """Returns ``((weight_grads, bias_grads), grad_wrt_input)``."""
    g = as_matrix(grad_wrt_embedding, "grad_wrt_embedding")
    if g.shape != trace.embedding.shape:
        raise ValueError(f"gradient shape {g.shape} != embedding shape {trace.embedding.shape}")
    g = normalize_backward(trace.embedding, trace.norms, g)
    n_layers = len(p.layer_weights)
    wgrads = [None] * n_layers
    bgrads = [None] * n_layers
    for i in reversed(range(n_layers)):
        if i != n_layers - 1:
            # subgradient of relu at 0 is 0
            g = g * (trace.pre_activations[i] > 0.0)
        wgrads[i] = trace.activations[i].T @ g
        bgrads[i] = g.sum(axis=0)
        g = g @ p.layer_weights[i].T
    return (wgrads, bgrads), g


def save_blocks(path, blocks):
    """Write named matrices to one CSV: ``block,row,v0,v1,...``, 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for name, m in blocks:
            m = np.atleast_2d(m)
            for r, row in enumerate(m):
                w.writerow([name, r] + ["%.17g" % v for v in row])


def load_blocks(path):
    rows = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for line in csv.reader(fh):
            rows.setdefault(line[0], []).append([float(v) for v in line[2:]])
    return {k: np.array(v, dtype=np.float64) for k, v in rows.items()}


def encoder_blocks(p):
    out = []
    for i, (w, b) in enumerate(zip(p.layer_weights, p.layer_biases)):
        out.append((f"W{i}", w))
        out.append((f"b{i}", b[None, :]))
    return out


def encoder_from_blocks(blocks, n_layers, embed_dim):
    ws = [blocks[f"W{i}"] for i in range(n_layers)]
    bs = [blocks[f"b{i}"][0] for i in range(n_layers)]
    return EncoderParams(ws, bs, embed_dim)


def save(p, path, seed=None, epoch=None):
    """JSON manifest at ``<path>.json`` plus CSV weight blocks at ``<path>.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "raw_dim": p.raw_dim,
        "hidden_dims": p.hidden_dims,
        "embed_dim": p.embed_dim,
        "activation": p.hidden_activation,
        "seed": seed,
        "epoch": epoch,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    save_blocks(path.with_suffix(".csv"), encoder_blocks(p))


def load(path):
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    blocks = load_blocks(path.with_suffix(".csv"))
    return encoder_from_blocks(blocks, len(manifest["hidden_dims"]) + 1, manifest["embed_dim"])
