"""
How small a change can each method see?
=======================================

A reduced benchmark over the logit-shift ladder. For every magnitude the
table shows the ROC AUC of logprob tracking (LT), the sequence-kernel test
(MET) and the accuracy-based test (MMLU), each separating original/original
tests from original/variant tests. Takes about a minute.
"""

from lptrack.evaluation import ExperimentPlan, run_benchmark, sensitivity_threshold

plan = ExperimentPlan(trials=100, seeds=(0, 1, 2), ladder=(0.0, 2**-8, 2**-6, 2**-4, 2**-2, 1.0), bootstrap_resamples=200)
result = run_benchmark(plan)

print(f"{'magnitude':>10}" + "".join(f"{m:>22}" for m in plan.methods))
summaries = {m: result.summary(m) for m in plan.methods}
for i, magnitude in enumerate(plan.ladder):
    cells = []
    for m in plan.methods:
        row = summaries[m][i]
        cells.append(f"{row['auc']:.3f} [{row['ci_low']:.2f},{row['ci_high']:.2f}]")
    print(f"{magnitude:>10.4g}" + "".join(f"{c:>22}" for c in cells))

for m in plan.methods:
    print(f"{m}: AUC >= 0.9 from magnitude {sensitivity_threshold(summaries[m])}")
