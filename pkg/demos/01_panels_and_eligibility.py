"""Counting-process panels and treatment-eligibility schedules.

Generates a small cohort with two intermittent treatments, thins it to
irregular measurement times, and walks through the data structures the
weighting machinery is built on: (start, stop] rows, eligibility
intervals (V, U], initiation counts, and censoring anchors.
"""

import io

import numpy as np

from ctmsm import (
    SimConfig,
    derive_eligibility,
    eligibility_to_csv,
    followup_anchor,
    make_ragged,
    simulate_rectangular,
)

print("=" * 70)
print("1. Simulate an aligned cohort, then thin it to ragged spacing")
print("=" * 70)

cfg = SimConfig(n=200, seed=42)
panel = simulate_rectangular(cfg)
ragged = make_ragged(panel, cfg.ragged.subject_fraction, cfg.ragged.drop_prob, seed=7)

print(f"aligned:  {panel.n_subjects} subjects, {panel.n_rows} rows "
      f"({panel.n_rows / panel.n_subjects:.1f} rows/subject)")
print(f"ragged:   {ragged.n_rows} rows ({ragged.n_rows / ragged.n_subjects:.1f} rows/subject)")
print(f"events:   {panel.event.sum()} ({panel.event.sum() / panel.n_subjects:.0%} of subjects)")

subj = panel.row_subject()
ever = np.zeros((panel.n_subjects, 2))
for w in range(2):
    np.maximum.at(ever[:, w], subj, panel.treatments[:, w])
neither = np.mean((ever[:, 0] == 0) & (ever[:, 1] == 0))
print(f"never treated: {neither:.0%}; ever A1: {ever[:, 0].mean():.0%}; ever A2: {ever[:, 1].mean():.0%}")

print()
print("=" * 70)
print("2. One subject's follow-up rows")
print("=" * 70)

i = int(np.argmax([ever[k].sum() == 2 for k in range(panel.n_subjects)]))
sl = ragged.subject_rows(i)
print(f"subject {ragged.subject_ids[i]}: rows (start, stop] with statuses")
for k in range(sl.start, min(sl.stop, sl.start + 12)):
    print(f"  ({ragged.start[k]:5.1f}, {ragged.stop[k]:5.1f}]  A1={ragged.treatments[k,0]} "
          f"A2={ragged.treatments[k,1]}  L1={ragged.covariates[k,0]:+.2f} L2={ragged.covariates[k,1]:.0f}")
if sl.stop - sl.start > 12:
    print(f"  ... {sl.stop - sl.start - 12} more rows")

print()
print("=" * 70)
print("3. Eligibility schedules: off-treatment spans (V, U]")
print("=" * 70)

for w in (1, 2):
    sch = derive_eligibility(ragged, w)[i]
    print(f"treatment A{w}: J={sch.J} intervals, Q={sch.Q} initiations")
    for (v, u), ini in zip(sch.intervals, sch.initiated):
        tag = "initiation at U" if ini else "reaches end of follow-up"
        print(f"  ({v:5.1f}, {u:5.1f}]  {tag}")

buf = io.StringIO()
eligibility_to_csv(derive_eligibility(ragged, 1)[:3], buf)
print("\nCSV export (first subjects):")
print(buf.getvalue())

print("=" * 70)
print("4. Censoring anchors G (evaluation times for censoring weights)")
print("=" * 70)
anchors = followup_anchor(ragged)
kinds = {}
for a in anchors:
    kinds[a.kind] = kinds.get(a.kind, 0) + 1
print(kinds)
