"""
Running a benchmark battery end to end
======================================

Builds a benchmark config, runs calibration, test rollouts, detector
scoring, the scripted monitor, and the combiner, then prints the headline
metrics and the artifacts the run wrote to disk.
"""

from pathlib import Path

from sentinel.evaluation import BenchmarkConfig, ScriptedMonitor, run_benchmark
from sentinel.policy import ScenarioConfig

# A mid-sized battery: 25 calibration episodes, then 15 nominal and 15
# erratic test episodes. The scripted monitor stands in for a live VLM
# with plausible hit and false-alarm rates.
config = BenchmarkConfig(
    scenario=ScenarioConfig(),
    detectors=("stac-mmd", "stac-klf", "min-l2", "outvar"),
    n_calibration=25,
    test_counts={"consistent": 15, "mode_resample": 15},
    delta=0.05,
    master_seed=11,
    sentinel_detector="stac-mmd",
    monitor=ScriptedMonitor(true_positive_rate=0.9, false_positive_rate=0.05),
)

out_dir = Path("benchmark_report")
report = run_benchmark(config, out_dir=out_dir)

# Every detector gets its own conformal threshold and metrics row; "vlm"
# is the monitor alone and "sentinel" is the union of the designated
# detector with the monitor.
print("detector      tpr     fpr     bal.acc  mean detection")
for name, row in report["metrics"].items():
    tpr = "  n/a" if row.get("tpr") is None else f"{row['tpr']:5.2f}"
    fpr = "  n/a" if row.get("fpr") is None else f"{row['fpr']:5.2f}"
    bal = "  n/a" if row.get("balanced_accuracy") is None else f"{row['balanced_accuracy']:5.2f}"
    mean_s = row.get("mean_detection_seconds")
    mean_s = "   n/a" if mean_s is None else f"{mean_s:5.1f}s"
    print(f"{name:12s}  {tpr}   {fpr}   {bal}    {mean_s}")

print()
print("calibration thresholds:")
for name, cal in report["calibration"].items():
    print(f"  {name:12s} gamma={cal['gamma']}")

print()
print(f"artifacts under {out_dir}/:")
for path in sorted(out_dir.iterdir()):
    print(f"  {path.name}  ({path.stat().st_size} bytes)")

# report.json mirrors the returned dict, verdicts.csv has one line per
# test episode, and the SVG plots every cumulative score curve against
# the sentinel detector's threshold.
