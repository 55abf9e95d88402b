"""Why a single threshold treats groups differently.

Generates the four-group benchmark and looks at raw features only: groups
whose identity centers sit closer together produce more look-alike
negative pairs, so one shared threshold gives them more false positives.
"""

# %%
import numpy as np

from fairfpr import metrics, synthdata

d = synthdata.generate(synthdata.default_specs(), raw_dim=32, seed=0)
print(d.num_samples, "samples,", d.num_classes, "identities, groups", d.groups)

# %% within-group similarity of different identities
for g, spec in zip(d.groups, d.spec):
    print(f"group {g}: center_concentration={spec.center_concentration:.1f} "
          f"mean non-target cosine={synthdata.mean_nontarget_cosine(d, g):.3f}")

# %% one threshold, four group FPRs
scores = metrics.build_pairs(d.features, d.identity_labels, d.group_labels,
                             max_pairs_per_group=20_000, balanced=False)
for gamma in (1e-2, 1e-1):
    det = metrics.bias_degree_details(scores, gamma)
    rates = ", ".join(f"{g}={r:.4f}" for g, r in det["group_fpr"].items())
    print(f"overall FPR {det['overall_fpr']:.4f} at t={det['threshold']:.3f}: {rates}  delta={det['bias_degree']:.3f}")

# %% the same group FPR spread, by hand, for a two-group hand example
print("delta for group FPRs {0.02, 0} at overall 0.01:", round(metrics.bias_degree_from_rates([0.02, 0.0], 0.01), 4))
print("population std of the rates:", np.std([0.02, 0.0]))
