"""
Conformal calibration and online detection
==========================================

Calibrates a detection threshold on success-only rollouts, then runs the
detector online on fresh episodes and reports when (and whether) it fires.
"""

from sentinel.calibration import conformal_threshold
from sentinel.evaluation import verdict_from_series
from sentinel.policy import ScenarioConfig, generate_rollout
from sentinel.stac import StacConfig, detect_online, score_rollout

scenario = ScenarioConfig()
config = StacConfig(distance="mmd")


def rollout(behavior, seed):
    return generate_rollout(scenario.build_policy(behavior, seed), scenario, seed=seed)


# Step 1: collect nominal rollouts and keep the successes. Calibration
# wants scores from episodes that actually look like the deployment
# distribution on a good day.
calibration = [rollout("consistent", 100 + i) for i in range(25)]
calibration = [log for log in calibration if not log.label.is_failure]
terminals = [score_rollout(log, config).terminal for log in calibration]

# Step 2: pick the threshold. With M scores and miss budget delta the
# threshold is the ceil((M+1)(1-delta))-th smallest terminal score, which
# bounds the false-alarm probability on a fresh nominal episode by delta.
result = conformal_threshold(terminals, delta=0.05)
print(f"calibrated on M={result.m} successes at delta={result.delta}")
print(f"threshold gamma = {result.gamma:.4f} "
      f"(order statistic {result.quantile_index} of {result.m})")

# Step 3: run online on fresh episodes. detect_online walks the cumulative
# score and returns the first timestep strictly above gamma, or None.
print()
print("behavior        outcome   terminal   detection")
for behavior, seed in [("consistent", 900), ("consistent", 901),
                       ("mode_resample", 902), ("mode_resample", 903)]:
    log = rollout(behavior, seed)
    series = score_rollout(log, config)
    fired_at = detect_online(series, result.gamma)
    verdict = verdict_from_series(series, result.gamma, "stac",
                                  log.header.step_duration)
    when = f"t={fired_at} ({verdict.detection_seconds:.1f}s)" if fired_at is not None else "never"
    print(f"{behavior:14s}  {log.label.outcome:8s}  {series.terminal:8.3f}   {when}")

# A verdict carries the same information in the form the benchmark report
# and the CLI use.
print()
print("verdict for the last episode above:", verdict.to_json_obj())
