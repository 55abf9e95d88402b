"""Finite-difference check of the penalty loss gradient on a tiny batch.

The mask and threshold are held fixed, as they are within a training
iteration, so only the smooth part of the loss is differentiated.
"""

# %%
import dataclasses

import numpy as np

from fairfpr import losses
from fairfpr.losses import LogitsBatch, LossConfig
from fairfpr.thresholding import estimate_threshold

rng = np.random.default_rng(7)
cos = rng.uniform(-0.6, 0.9, size=(4, 6))
labels = np.array([0, 2, 3, 5])
batch = LogitsBatch(cos, labels)
cfg = LossConfig(kind=losses.PENALTY_COSFACE, s=8.0, alpha=0.05, p=2.0, gamma_u=0.1)
est = estimate_threshold(batch, cfg.gamma_u)
# T_u is itself a pool value, so nudging that cell would flip the mask.
# Move the threshold halfway to the next pool value below it.
pool = np.sort(cos[~batch.target_mask()])
below = pool[pool < est.t_u].max()
thr = dataclasses.replace(est, t_u=0.5 * (est.t_u + below))
out = losses.loss_forward(batch, cfg, thr)
print("T_u", round(thr.t_u, 4), "instance FPRs", out.penalty_state.instance_fpr)

# %% central differences, h = 1e-6
h = 1e-6
num = np.zeros_like(cos)
for i, j in np.ndindex(cos.shape):
    up, dn = cos.copy(), cos.copy()
    up[i, j] += h
    dn[i, j] -= h
    num[i, j] = (losses.loss_forward(LogitsBatch(up, labels), cfg, thr).loss
                 - losses.loss_forward(LogitsBatch(dn, labels), cfg, thr).loss) / (2 * h)
err = np.abs(num - out.grad_wrt_cosines).max() / np.abs(num).max()
print("max relative error", err)

# %% the penalty shifts every non-target logit of a flagged row, so the
# whole row's gradient changes, while the extra F-term sits on masked cells
plain = losses.loss_forward(batch, LossConfig(kind=losses.COSFACE, s=8.0), thr).grad_wrt_cosines
print("rows with a penalty:", np.flatnonzero(out.penalty_state.instance_fpr > 0))
print("gradient change:\n", np.round(out.grad_wrt_cosines - plain, 4))
print("mask:\n", out.penalty_state.mask.astype(int))
