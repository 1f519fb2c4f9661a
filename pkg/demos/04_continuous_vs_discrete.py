"""Continuous-time weights versus the aligned discrete-time comparator.

A miniature version of the benchmark study. The discrete-time method
must re-bin follow-up onto a common grid: initiation boundaries move to
bin edges, covariates are carried to bin starts, and events land at bin
ends, so its error grows with the bin width. The continuous-time method
works on the observed measurement times directly and needs no alignment.
Small replication count for a quick look; the acceptance suite runs the
full-size version.
"""

import time

from ctmsm import ForestParams, SimConfig, WeightConfig, run_benchmark

t0 = time.time()
cfg = SimConfig(n=300)
rows = run_benchmark(
    cfg,
    estimators=("iv",),
    methods=("JMSSM-CT", "JMSM-DT:2", "JMSM-DT:1"),
    reps=10,
    seed=99,
    data_format="ragged",
    weight_config=WeightConfig(seed=0, forest=ForestParams(n_trees=40)),
    n_jobs=2,
)
print(f"(10 replications at n=300 in {time.time() - t0:.0f}s)\n")
print(f"{'method':<12} {'param':<6} {'MAB':>8} {'RMSE':>8} {'CP':>6}")
for r in rows:
    print(f"{r.method:<12} {r.param:<6} {r.mab:>8.4f} {r.rmse:>8.4f} {r.cp:>6.2f}")

print("""
Because treatment here evolves on a daily clock and administration times
survive the thinning, one-day bins lose little and the discrete-time
comparator holds up well at this scale; two-day bins visibly distort
initiation timing. The continuous-time weights need no alignment choice
at all, which is the point: their accuracy does not hinge on guessing a
bin width. The `ctmsm compare-dt` command writes the full comparison
table as CSV.
""")
