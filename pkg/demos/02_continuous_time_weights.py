"""The four continuous-time weighting estimators.

Fits treatment-initiation intensity models with each backend on one
ragged replication and compares the per-subject stabilized weight
distributions: (i) Cox intensity ratio + step Nelson-Aalen baseline,
(ii) Cox + kernel-smoothed baseline, (iii) relative-risk forest + step
baseline, (iv) forest + smoothed baseline.
"""

import numpy as np

from ctmsm import (
    ForestParams,
    SimConfig,
    WeightConfig,
    estimate_weights,
    make_ragged,
    null_config,
    simulate_rectangular,
)

panel = make_ragged(simulate_rectangular(SimConfig(n=500, seed=11)), 0.5, 0.3, seed=3)
print(f"panel: {panel.n_subjects} subjects, {panel.n_rows} rows, {panel.event.sum()} events\n")

print(f"{'estimator':<10} {'min':>8} {'q1':>8} {'mean':>8} {'q3':>8} {'max':>8}")
tables = {}
for est in ("i", "ii", "iii", "iv"):
    cfg = WeightConfig(seed=5, estimator=est, forest=ForestParams(n_trees=50))
    table = estimate_weights(panel, config=cfg)
    tables[est] = table
    d = table.diagnostics()
    print(f"{est:<10} {d['min']:>8.3f} {d['q1']:>8.3f} {d['mean']:>8.3f} {d['q3']:>8.3f} {d['max']:>8.3f}")

print("""
The mean sits near 1 for every backend (stabilization); the flexible
backends differ in how sharply the denominator discriminates subjects,
which shows up in the spread.
""")

print("=" * 70)
print("Sanity anchor: with no confounding, every backend centers on 1")
print("=" * 70)
null_panel = make_ragged(simulate_rectangular(null_config(n=500, seed=12)), 0.5, 0.3, seed=4)
for est in ("i", "iv"):
    cfg = WeightConfig(seed=5, estimator=est, forest=ForestParams(n_trees=50))
    d = estimate_weights(null_panel, config=cfg).diagnostics()
    print(f"null data, estimator {est}: mean={d['mean']:.3f} (min={d['min']:.2f}, max={d['max']:.2f})")

print()
print("=" * 70)
print("Per-treatment factorization (first subjects)")
print("=" * 70)
t = tables["iv"]
tot = t.totals
print(f"{'id':<6} {'omega_A1':>9} {'omega_A2':>9} {'omega_C':>8} {'total':>8}")
for i in range(6):
    print(f"{t.subject_ids[i]:<6} {t.treatment_weights[i,0]:>9.3f} "
          f"{t.treatment_weights[i,1]:>9.3f} {t.censor_weights[i]:>8.3f} {tot[i]:>8.3f}")
