"""Margin-softmax losses and the instance-FPR penalty variant.

All losses share the form

    L_i = -log( e^{s G(cos_y)} / (e^{s G(cos_y)} + sum_{j != y} e^{H_j}) )

with ``G`` the target-logit margin (none, CosFace ``cos - m``, ArcFace
``cos(theta + m)``) and ``H_j = s * cos_j`` for the plain kinds. The penalty
kinds shift every non-target logit of sample ``i`` by
``s * alpha * wfpr_i / gamma_u`` where ``wfpr_i`` is the sample's weighted
instance FPR against the batch threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix, check_finite
from .thresholding import ThresholdEstimate

PLAIN = "plain-softmax"
COSFACE = "cosface"
ARCFACE = "arcface"
PENALTY_COSFACE = "fpr-penalty-cosface"
PENALTY_ARCFACE = "fpr-penalty-arcface"
KINDS = (PLAIN, COSFACE, ARCFACE, PENALTY_COSFACE, PENALTY_ARCFACE)

ARCCOS_CLAMP = 1.0 - 1e-7


@dataclass(frozen=True)
class LossConfig:
    kind: str = COSFACE
    s: float = 64.0
    m: float = 0.35
    alpha: float = 0.05
    p: float = 2.0
    gamma_u: float = 1e-4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not self.s > 0:
            raise ValueError("s must be > 0")
        if self.uses_arc_margin:
            if not 0.0 <= self.m < np.pi / 2:
                raise ValueError("arcface margin must lie in [0, pi/2)")
        elif not 0.0 <= self.m < 1.0:
            raise ValueError("margin must lie in [0, 1)")
        if not 0.0 < self.gamma_u < 1.0:
            raise ValueError("gamma_u must be in (0, 1)")
        if not self.p >= 1.0:
            raise ValueError("p must be >= 1")
        if not self.alpha >= 0.0:
            raise ValueError("alpha must be >= 0")

    @property
    def is_penalty(self):
        return self.kind in (PENALTY_COSFACE, PENALTY_ARCFACE)

    @property
    def uses_arc_margin(self):
        return self.kind in (ARCFACE, PENALTY_ARCFACE)

    @property
    def uses_cos_margin(self):
        return self.kind in (COSFACE, PENALTY_COSFACE)

    def to_dict(self):
        return {"kind": self.kind, "s": self.s, "m": self.m, "alpha": self.alpha,
                "p": self.p, "gamma_u": self.gamma_u}

    @classmethod
    def from_dict(cls, d):
        base = cls()
        return cls(
            kind=d.get("kind", base.kind),
            s=float(d.get("s", base.s)),
            m=float(d.get("m", base.m)),
            alpha=float(d.get("alpha", base.alpha)),
            p=float(d.get("p", base.p)),
            gamma_u=float(d.get("gamma_u", base.gamma_u)),
        )


@dataclass
class LogitsBatch:
    cosines: np.ndarray  # (n_b, c)
    labels: np.ndarray  # (n_b,)

    def __post_init__(self):
        self.cosines = as_matrix(self.cosines, "cosines")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n, c = self.cosines.shape
        if self.labels.shape != (n,):
            raise ValueError("need exactly one label per row")
        if n and (self.labels.min() < 0 or self.labels.max() >= c):
            raise ValueError("labels out of range")

    @property
    def num_classes(self):
        return self.cosines.shape[1]

    def target_mask(self):
        t = np.zeros(self.cosines.shape, dtype=bool)
        t[np.arange(len(self.labels)), self.labels] = True
        return t


@dataclass
class PenaltyState:
    threshold: ThresholdEstimate
    mask: np.ndarray
    instance_fpr: np.ndarray
    weighted_instance_fpr: np.ndarray


@dataclass
class LossOutput:
    loss: float
    grad_wrt_cosines: np.ndarray
    per_sample_loss: np.ndarray
    penalty_state: PenaltyState = None
    logits: np.ndarray = field(default=None, repr=False)


def normalize_columns(w):
    """Unit-norm columns of ``w`` and the original column norms."""
    w = as_matrix(w, "class_weights")
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("class weight column with zero norm")
    return w / norms, norms


def cosine_logits(embeddings, class_weights, labels):
    """Cosines between unit-norm embedding rows and unit-norm weight columns, clamped to [-1, 1]."""
    x = as_matrix(embeddings, "embeddings")
    w = as_matrix(class_weights, "class_weights")
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"embedding dim {x.shape[1]} != weight rows {w.shape[0]}")
    return LogitsBatch(np.clip(x @ w, -1.0, 1.0), labels)


def fpr_weight(z, p):
    """F(z) = sgn(z) |z|^p; equals z^p for the positive cosines above a positive threshold."""
    return np.sign(z) * np.abs(z) ** p


def fpr_weight_grad(z, p):
    return p * np.abs(z) ** (p - 1.0)


def instance_fpr(batch, threshold, p=2.0):
    """Per-sample plain and weighted FPR over non-target columns.

    Returns ``(plain, weighted, mask)`` where ``mask[i, j]`` marks non-target
    cosines strictly above ``threshold.t_u``.
    """
    c = batch.num_classes
    if c < 2:
        raise ValueError("instance FPR needs at least two classes")
    t = threshold.t_u if isinstance(threshold, ThresholdEstimate) else float(threshold)
    if not np.isfinite(t):
        raise ValueError("threshold must be finite")
    mask = (batch.cosines > t) & ~batch.target_mask()
    plain = mask.sum(axis=1) / (c - 1)
    weighted = np.where(mask, fpr_weight(batch.cosines, p), 0.0).sum(axis=1) / (c - 1)
    return plain, weighted, mask


def penalty_state(batch, threshold, p):
    plain, weighted, mask = instance_fpr(batch, threshold, p)
    return PenaltyState(threshold, mask, plain, weighted)


def target_margin(cos_y, cfg):
    """G(cos) and dG/dcos for the target column."""
    if cfg.uses_cos_margin:
        return cos_y - cfg.m, np.ones_like(cos_y)
    if cfg.uses_arc_margin:
        inside = np.abs(cos_y) < ARCCOS_CLAMP
        c = np.clip(cos_y, -ARCCOS_CLAMP, ARCCOS_CLAMP)
        theta = np.arccos(c)
        g = np.cos(theta + cfg.m)
        dg = np.where(inside, np.sin(theta + cfg.m) / np.sin(theta), 0.0)
        return g, dg
    return cos_y.copy(), np.ones_like(cos_y)


def _logits(batch, cfg, state):
    n = len(batch.labels)
    rows = np.arange(n)
    cos = batch.cosines
    g, dg = target_margin(cos[rows, batch.labels], cfg)
    z = cfg.s * cos
    if cfg.is_penalty:
        shift = cfg.s * cfg.alpha * state.weighted_instance_fpr / cfg.gamma_u
        z = z + shift[:, None]
    z[rows, batch.labels] = cfg.s * g
    return z, dg


def _softmax_rows(z):
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    tot = e.sum(axis=1, keepdims=True)
    return e / tot, (zmax + np.log(tot))[:, 0]


def loss_forward(batch, cfg, threshold=None):
    """Mean loss over the batch, per-sample losses and the cosine gradient.

    ``threshold`` is mandatory for the penalty kinds; for the other kinds it
    is optional and only used to fill ``penalty_state`` for logging.
    """
    if cfg.is_penalty and threshold is None:
        raise ValueError(f"loss kind {cfg.kind!r} requires a threshold estimate")
    state = penalty_state(batch, threshold, cfg.p) if threshold is not None else None
    z, _ = _logits(batch, cfg, state)
    _, lse = _softmax_rows(z)
    per_sample = lse - z[np.arange(len(batch.labels)), batch.labels]
    check_finite(per_sample, "per-sample loss")
    out = LossOutput(float(per_sample.mean()), None, per_sample, state, z)
    out.grad_wrt_cosines = loss_backward(batch, cfg, out)
    return out


def loss_backward(batch, cfg, out):
    """Gradient of the mean loss w.r.t. the cosine matrix.

    The mask and threshold are constants of the iteration; the weighted FPR
    still depends on the masked cosines through F, which gives every masked
    column an extra term proportional to the sample's total non-target
    probability.
    """
    if cfg.is_penalty and out.penalty_state is None:
        raise ValueError("penalty loss output carries no penalty state")
    if out.per_sample_loss.shape != batch.labels.shape:
        raise ValueError("loss output does not match batch size")
    n, c = batch.cosines.shape
    rows = np.arange(n)
    z, dg = _logits(batch, cfg, out.penalty_state)
    if out.logits is not None and out.logits.shape != z.shape:
        raise ValueError("loss output does not match cosine shape")
    prob, _ = _softmax_rows(z)
    dz = prob
    dz[rows, batch.labels] -= 1.0
    dz /= n
    grad = cfg.s * dz
    grad[rows, batch.labels] *= dg
    if cfg.is_penalty and cfg.alpha != 0.0:
        st = out.penalty_state
        nontarget = dz.sum(axis=1) - dz[rows, batch.labels]
        coef = cfg.s * cfg.alpha / cfg.gamma_u / (c - 1)
        dF = np.where(st.mask, fpr_weight_grad(batch.cosines, cfg.p), 0.0)
        grad += (coef * nontarget)[:, None] * dF
    return grad


def classifier_grads(embeddings, class_weights, grad_wrt_cosines):
    """Backprop ``cos = x @ (W / ||W||_col)`` to unit embeddings ``x`` and raw weights ``W``.

    Returns ``(grad_weights, grad_embeddings)``.
    """
    x = as_matrix(embeddings, "embeddings")
    g = as_matrix(grad_wrt_cosines, "grad_wrt_cosines")
    w_hat, norms = normalize_columns(class_weights)
    if x.shape[1] != w_hat.shape[0] or g.shape != (x.shape[0], w_hat.shape[1]):
        raise ValueError(f"shape mismatch: x {x.shape}, W {w_hat.shape}, grad {g.shape}")
    grad_x = g @ w_hat.T
    grad_w_hat = x.T @ g
    radial = np.sum(grad_w_hat * w_hat, axis=0, keepdims=True)
    grad_w = (grad_w_hat - radial * w_hat) / norms
    return grad_w, grad_x
