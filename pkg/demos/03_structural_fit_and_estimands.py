"""Weighted structural fit, robust inference, and counterfactual summaries.

Estimates the joint treatment effects on one replication, compares naive
and weighted fits against the generator's truth, and converts the fit
into counterfactual survival curves and restricted mean survival times
for static regimens.
"""

import numpy as np

from ctmsm import (
    ForestParams,
    Regimen,
    SimConfig,
    StructuralModelSpec,
    WeightConfig,
    counterfactual_survival,
    estimate_weights,
    fit_weighted_cox,
    make_ragged,
    rmst,
    simulate_rectangular,
    survival_at,
)

TRUTH = np.array([-0.5, -0.3])
panel = make_ragged(simulate_rectangular(SimConfig(n=1000, seed=23)), 0.5, 0.3, seed=6)
spec = StructuralModelSpec(n_treatments=2)

naive = fit_weighted_cox(panel, None, spec)
weights = estimate_weights(panel, config=WeightConfig(seed=9, estimator="iv", forest=ForestParams(n_trees=50)))
fit = fit_weighted_cox(panel, weights, spec)

print("truth        psi1=%+.3f  psi2=%+.3f" % tuple(TRUTH))
for label, f in (("naive", naive), ("weighted(iv)", fit)):
    lo, hi = f.ci()
    print("%-12s psi1=%+.3f (%+.3f,%+.3f)  psi2=%+.3f (%+.3f,%+.3f)"
          % (label, f.psi_hat[0], lo[0], hi[0], f.psi_hat[1], lo[1], hi[1]))
print("\nThe unweighted fit is pulled far from the truth by treatment-"
      "confounder feedback;\nthe weighted fit recovers most of it.\n")

print("=" * 70)
print("Counterfactual 14-day survival and RMST under static regimens")
print("=" * 70)
regimens = [
    Regimen.never("untreated", 14.0),
    Regimen.always("always-A1", (1,), 14.0),
    Regimen.always("always-A2", (2,), 14.0),
    Regimen.always("both", (1, 2), 14.0),
    Regimen("A1-then-A2", 14.0, {1: ((0.0, 7.0),), 2: ((7.0, 14.0),)}),
]
print(f"{'regimen':<12} {'S(14)':>8} {'RMST(14)':>9}")
for reg in regimens:
    curve = counterfactual_survival(fit, reg)
    print(f"{reg.label:<12} {survival_at(curve, 14.0):>8.4f} {rmst(curve, 14.0):>9.3f}")

print("""
With both structural effects negative, staying on treatment dominates:
the always-treated curves sit above the untreated one at every horizon.
Bootstrap confidence intervals for these summaries are available through
ctmsm.bootstrap_ci (see README), which resamples subjects and re-runs
the whole weighting pipeline per replicate.
""")
