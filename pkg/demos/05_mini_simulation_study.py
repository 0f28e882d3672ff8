"""A desk-scale simulation study, end to end.

Generates masked cohorts under one mechanism, applies several missing-data
strategies to each replication (the same masked data feeds every method, so
comparisons are paired), and aggregates relative bias, empirical SE, model-SE
error, and coverage with Monte Carlo standard errors.

This miniature uses few replications and small bootstrap sizes so it finishes
in a couple of minutes; the acceptance suite runs the full-scale versions.
"""

import tempfile

from medmiss import ScenarioConfig, compute_metrics, estimate_truth, report, run_scenario

truth = estimate_truth(n=300_000, seed=20240501)
print("truth (n=3e5): indirect %.4f  direct %.4f  total %.4f"
      % (truth.indirect, truth.direct, truth.total))

config = ScenarioConfig(
    mdag="A",
    methods=("cca", "mi-nozy", "mi-noint"),
    estimators=("dr",),
    variance=("miboot", "bootmi"),
    n=2000,
    reps=30,
    base_seed=77,
    workers=2,
    m_miboot=10,
    m_bootmi=2,
    b_boot=40,
)
raw = run_scenario(config)
print(f"\nraw table: {len(raw)} rows "
      f"({config.reps} reps x methods x variance approaches x 3 estimands)")

metrics = compute_metrics(raw, truth)
cols = ["method", "variance", "estimand", "relative_bias_pct", "empirical_se",
        "se_error_pct", "coverage_pct"]
print("\nindirect-effect metrics:")
print(metrics[metrics["estimand"] == "indirect"][cols].to_string(index=False))

with tempfile.TemporaryDirectory() as out:
    files = report(metrics, out, prefix="demo")
    print("\nreport files written:", [f.split("/")[-1] for f in files])

print("""
note: at 30 replications the Monte Carlo error is large; the study-scale
qualitative pattern (mi-nozy badly biased, mi-noint nearly unbiased under
mechanism A, Boot-MI model SEs closer to the empirical SE than MI-Boot)
emerges reliably at hundreds of replications.""")
