"""
Threshold and seed sweep
========================

Repeating the rotation analysis over seeds and activity thresholds shows how
stable the deletion and recovery numbers are.
"""

import tempfile
from pathlib import Path

from concept_forgetting import pipeline
from concept_forgetting.synth import SynthSpec, generate, write_synth

work = Path(tempfile.mkdtemp())
write_synth(work / "features", generate(SynthSpec(d=32, n_atoms=32, k_true=3, n_train=10000, n_test=2000,
                                                  drift={"kind": "rotation"}, seed=0)))

config = pipeline.synthetic_reference_config(work / "features", work / "out", n_runs=5, k_grid=[4],
                                             batch_grid=[16], tau_grid=[0.0125, 0.05, 0.2], ms=False)
report = pipeline.run_sweep(config)
cell = report["cells"][0]



def fmt(q):
    # regained ratios are null for runs where nothing was deleted
    if q["n"] == 0:
        return "n/a"
    return "%.3f [%.3f] (n=%d)" % (q["median"], q["iqr"], q["n"])


print("tau     active(t)  deletion median [IQR]    regained median [IQR]")
for s in cell["summary"]:
    q = s["quartiles"]
    print("%-6g  %9.1f  %-23s  %s" % (s["tau"], q["active_count_t"]["median"], fmt(q["deletion_ratio"]),
                                      fmt(q["regained_count_ratio"])))
print("failed cells:", report["failed_cells"])
print("per-metric quartiles in", Path(config.out_dir) / "tables" / "sweep.csv")
