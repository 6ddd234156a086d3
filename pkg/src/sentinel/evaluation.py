"""Combined detection verdicts, metrics, and synthetic benchmark batteries.

The combiner unions a statistical detector with the task-progression monitor
(execution stops when either flags), metrics follow the standard confusion
conventions with undefined rates omitted rather than faked, and run_benchmark
wires generation, calibration, scoring, and reporting into one deterministic
pass that writes JSON/CSV/SVG artifacts.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .baselines import DETECTOR_NAMES, DetectorContext, EmbeddingStats, score_log
from .calibration import (DEFAULT_DELTA, conformal_threshold,
                          leave_trajectory_out_stats, pooled_stats)
from .distances import BandwidthConfig
from .policy import BEHAVIORS, ScenarioConfig, default_goal_label, generate_rollout
from .rollout import RolloutLog
from .stac import ScoreSeries, detect_online

_STAC_FAMILY = ("stac-mmd", "stac-klf", "stac-klr", "min-l2")


def detector_source(name: str) -> str:
    """Verdict source tag: the consistency family reports as 'stac'."""
    return "stac" if name in _STAC_FAMILY else f"baseline:{name}"


@dataclass(frozen=True)
class Verdict:
    decision: str
    source: str
    detection_timestep: Optional[int] = None
    detection_seconds: Optional[float] = None

    def __post_init__(self):
        if self.decision not in ("ok", "failure"):
            raise ValueError(f"invalid decision {self.decision!r}")
        if not self.source:
            raise ValueError("source must be nonempty")
        has_timestep = self.detection_timestep is not None
        if (self.decision == "failure") != has_timestep:
            raise ValueError("decision is failure iff a detection timestep is present")
        if has_timestep != (self.detection_seconds is not None):
            raise ValueError("detection_seconds must accompany detection_timestep")

    def to_json_obj(self) -> dict:
        obj = {"decision": self.decision, "source": self.source}
        if self.detection_timestep is not None:
            obj["detection_timestep"] = int(self.detection_timestep)
            obj["detection_seconds"] = float(self.detection_seconds)
        return obj


def ok_verdict(source: str) -> Verdict:
    return Verdict(decision="ok", source=source)


def failure_verdict(source: str, timestep: int, step_duration: float) -> Verdict:
    return Verdict(decision="failure", source=source, detection_timestep=int(timestep),
                   detection_seconds=float(timestep) * float(step_duration))


def verdict_from_series(series: ScoreSeries, gamma: float, source: str,
                        step_duration: float) -> Verdict:
    hit = detect_online(series, gamma)
    if hit is None:
        return ok_verdict(source)
    return failure_verdict(source, hit, step_duration)


def _iter_verdicts(stream) -> list:
    if stream is None:
        return []
    if isinstance(stream, Verdict):
        return [stream]
    return list(stream)


def combine(stac_stream, vlm_stream=None) -> Verdict:
    """Union of both detectors: failure if either flags, at the earliest flag.

    Streams tick at their own cadences; a missing monitor stream degrades to
    the statistical detector alone.
    """
    ticks = _iter_verdicts(stac_stream) + _iter_verdicts(vlm_stream)
    failures = [v for v in ticks if v.decision == "failure"]
    if not failures:
        return ok_verdict("sentinel")
    first = min(failures, key=lambda v: v.detection_timestep)
    return Verdict(decision="failure", source="sentinel",
                   detection_timestep=first.detection_timestep,
                   detection_seconds=first.detection_seconds)


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    mean_detection_seconds: Optional[float] = None

    @property
    def tpr(self) -> Optional[float]:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) > 0 else None

    @property
    def tnr(self) -> Optional[float]:
        return self.tn / (self.tn + self.fp) if (self.tn + self.fp) > 0 else None

    @property
    def fpr(self) -> Optional[float]:
        # Computed from counts, not as 1 - tnr, so the ratio is exact.
        return self.fp / (self.tn + self.fp) if (self.tn + self.fp) > 0 else None

    @property
    def accuracy(self) -> float:
        total = self.tp + self.tn + self.fp + self.fn
        return (self.tp + self.tn) / total

    @property
    def balanced_accuracy(self) -> Optional[float]:
        tpr, tnr = self.tpr, self.tnr
        if tpr is None or tnr is None:
            return None
        return (tpr + tnr) / 2.0

    def to_json_obj(self) -> dict:
        obj = {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
               "accuracy": self.accuracy}
        for key in ("tpr", "tnr", "fpr", "balanced_accuracy"):
            value = getattr(self, key)
            if value is not None:
                obj[key] = value
        if self.mean_detection_seconds is not None:
            obj["mean_detection_seconds"] = self.mean_detection_seconds
        return obj


def _is_failure_label(label) -> bool:
    if isinstance(label, str):
        if label not in ("success", "failure"):
            raise ValueError(f"invalid label {label!r}")
        return label == "failure"
    return bool(label.is_failure)


def compute_metrics(verdicts: Sequence[Verdict], labels: Sequence) -> MetricsReport:
    """Confusion counts and rates; detection time averaged over true positives."""
    if len(verdicts) != len(labels):
        raise ValueError(f"{len(verdicts)} verdicts vs {len(labels)} labels")
    if not verdicts:
        raise ValueError("need at least one verdict")
    tp = tn = fp = fn = 0
    detection_times = []
    for verdict, label in zip(verdicts, labels):
        failed = _is_failure_label(label)
        flagged = verdict.decision == "failure"
        if failed and flagged:
            tp += 1
            detection_times.append(verdict.detection_seconds)
        elif failed:
            fn += 1
        elif flagged:
            fp += 1
        else:
            tn += 1
    mean_detection = sum(detection_times) / len(detection_times) if detection_times else None
    return MetricsReport(tp=tp, tn=tn, fp=fp, fn=fn, mean_detection_seconds=mean_detection)


@dataclass
class ScriptedMonitor:
    """Offline stand-in for the video-QA monitor with set confusion rates.

    Flags (per its rates, against ground truth) at the checkpoint fraction of
    the time limit, mimicking the twice-per-episode query cadence.
    """

    true_positive_rate: float = 0.95
    false_positive_rate: float = 0.05
    checkpoint_fraction: float = 0.5

    def __post_init__(self):
        for rate in (self.true_positive_rate, self.false_positive_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("confusion rates must be in [0, 1]")
        if not 0.0 < self.checkpoint_fraction <= 1.0:
            raise ValueError("checkpoint_fraction must be in (0, 1]")

    def checkpoint_timestep(self, log: RolloutLog) -> int:
        header = log.header
        budget = self.checkpoint_fraction * header.task_time_limit
        best = log.records[0].timestep
        for record in log.records:
            if record.timestep * header.step_duration <= budget:
                best = record.timestep
        return best

    def verdict(self, log: RolloutLog, rng: np.random.Generator) -> Verdict:
        if log.label is None:
            raise ValueError("scripted monitor needs a labeled rollout")
        rate = self.true_positive_rate if log.label.is_failure else self.false_positive_rate
        if rng.random() < rate:
            return failure_verdict("vlm", self.checkpoint_timestep(log), log.header.step_duration)
        return ok_verdict("vlm")

    def to_json_obj(self) -> dict:
        return {"true_positive_rate": self.true_positive_rate,
                "false_positive_rate": self.false_positive_rate,
                "checkpoint_fraction": self.checkpoint_fraction}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScriptedMonitor":
        known = {"true_positive_rate", "false_positive_rate", "checkpoint_fraction"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown monitor keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class BenchmarkConfig:
    """One battery: scenario geometry, set sizes, detector roster, seeds."""

    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    detectors: tuple = DETECTOR_NAMES
    n_calibration: int = 50
    test_counts: dict = field(default_factory=lambda: {"consistent": 50, "mode_resample": 50})
    delta: float = DEFAULT_DELTA
    master_seed: int = 0
    sentinel_detector: str = "stac-mmd"
    monitor: Optional[ScriptedMonitor] = None

    def __post_init__(self):
        self.detectors = tuple(self.detectors)
        for name in self.detectors:
            if name not in DETECTOR_NAMES:
                raise ValueError(f"unknown detector {name!r}")
        if self.sentinel_detector not in self.detectors:
            raise ValueError("sentinel_detector must be in the detector roster")
        if self.n_calibration < 2:
            raise ValueError("need at least 2 calibration rollouts")
        if not self.test_counts:
            raise ValueError("test_counts must be nonempty")
        for behavior, count in self.test_counts.items():
            if behavior not in BEHAVIORS:
                raise ValueError(f"unknown behavior {behavior!r}")
            if count < 1:
                raise ValueError("test counts must be >= 1")

    def to_json_obj(self) -> dict:
        obj = {
            "scenario": self.scenario.to_json_obj(),
            "detectors": list(self.detectors),
            "n_calibration": self.n_calibration,
            "test_counts": dict(self.test_counts),
            "delta": self.delta,
            "master_seed": self.master_seed,
            "sentinel_detector": self.sentinel_detector,
        }
        if self.monitor is not None:
            obj["monitor"] = self.monitor.to_json_obj()
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BenchmarkConfig":
        known = {"scenario", "detectors", "n_calibration", "test_counts", "delta",
                 "master_seed", "sentinel_detector", "monitor"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown benchmark config keys: {sorted(unknown)}")
        kwargs = dict(obj)
        if "scenario" in kwargs:
            kwargs["scenario"] = ScenarioConfig.from_json_obj(kwargs["scenario"])
        if "detectors" in kwargs:
            kwargs["detectors"] = tuple(kwargs["detectors"])
        if kwargs.get("monitor") is not None:
            kwargs["monitor"] = ScriptedMonitor.from_json_obj(kwargs["monitor"])
        return cls(**kwargs)


# Seed layout: calibration trajectory i gets master*1e6 + i, test trajectory j
# gets master*1e6 + 500000 + j, so reports depend only on (config, indices).
_SEED_BLOCK = 1_000_000
_TEST_OFFSET = 500_000


def _trajectory_seed(master_seed: int, index: int, test: bool) -> int:
    return master_seed * _SEED_BLOCK + (_TEST_OFFSET if test else 0) + index


def _generate(config: BenchmarkConfig, behavior: str, seed: int) -> RolloutLog:
    policy = config.scenario.build_policy(behavior, seed)
    return generate_rollout(policy, config.scenario, label_rule=default_goal_label, seed=seed)


def _embedding_matrix(log: RolloutLog) -> np.ndarray:
    rows = [record.embedding for record in log.records]
    if any(row is None for row in rows):
        raise ValueError("benchmark detectors need embeddings in every record")
    return np.stack(rows)


def run_benchmark(config: BenchmarkConfig, out_dir=None, jobs: Optional[int] = None) -> dict:
    """Calibrate every detector on nominal rollouts, score a mixed test set,
    union the designated detector with the scripted monitor, and write
    deterministic report artifacts. Returns the report dict."""
    jobs = jobs or os.cpu_count() or 1
    scenario = config.scenario
    oracle = scenario.build_policy("consistent", seed=0)

    cal_seeds = [_trajectory_seed(config.master_seed, i, test=False)
                 for i in range(config.n_calibration)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        cal_logs = list(pool.map(lambda s: _generate(config, "consistent", s), cal_seeds))
    kept = [(seed, log) for seed, log in zip(cal_seeds, cal_logs)
            if log.label is not None and not log.label.is_failure]
    if len(kept) < 2:
        raise ValueError("fewer than 2 success-labeled calibration rollouts; "
                         "scenario is not nominal enough to calibrate")
    cal_seeds = [seed for seed, _ in kept]
    cal_logs = [log for _, log in kept]

    test_plan = []  # (behavior, seed)
    index = 0
    for behavior, count in config.test_counts.items():
        for _ in range(count):
            test_plan.append((behavior, _trajectory_seed(config.master_seed, index, test=True)))
            index += 1
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        test_logs = list(pool.map(lambda bs: _generate(config, bs[0], bs[1]), test_plan))

    needs_embedding_stats = "mahalanobis" in config.detectors
    lto_stats = pooled = None
    if needs_embedding_stats:
        embeddings = [_embedding_matrix(log) for log in cal_logs]
        lto_stats = [EmbeddingStats.from_mean_cov(mu, cov)
                     for mu, cov in leave_trajectory_out_stats(embeddings)]
        pooled = EmbeddingStats.from_mean_cov(*pooled_stats(embeddings))

    def _context(name: str, seed: int, stats) -> DetectorContext:
        return DetectorContext(bandwidths=BandwidthConfig(), oracle=oracle,
                               embedding_stats=stats if name == "mahalanobis" else None,
                               seed=seed)

    def _score_one(args):
        name, log, seed, stats = args
        return score_log(name, log, _context(name, seed, stats)).terminal

    calibrations: dict = {}
    for name in config.detectors:
        tasks = []
        for i, (seed, log) in enumerate(zip(cal_seeds, cal_logs)):
            stats = lto_stats[i] if name == "mahalanobis" else None
            tasks.append((name, log, seed, stats))
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            terminals = list(pool.map(_score_one, tasks))
        calibrations[name] = conformal_threshold(terminals, config.delta)

    series_by_detector: dict = {}
    verdicts_by_detector: dict = {}
    step_duration = scenario.step_duration
    for name in config.detectors:
        gamma = calibrations[name].gamma
        source = detector_source(name)

        def _score_series(args):
            log, seed = args
            ctx = _context(name, seed, pooled)
            return score_log(name, log, ctx)

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            series = list(pool.map(_score_series,
                                   [(log, seed) for (behavior, seed), log in zip(test_plan, test_logs)]))
        series_by_detector[name] = series
        verdicts_by_detector[name] = [
            verdict_from_series(s, gamma, source, step_duration) for s in series]

    monitor_verdicts = None
    if config.monitor is not None:
        monitor_verdicts = []
        for i, log in enumerate(test_logs):
            rng = np.random.default_rng(np.random.SeedSequence((config.master_seed, 7, i)))
            monitor_verdicts.append(config.monitor.verdict(log, rng))

    sentinel_verdicts = []
    primary = verdicts_by_detector[config.sentinel_detector]
    for i in range(len(test_logs)):
        vlm_stream = [monitor_verdicts[i]] if monitor_verdicts is not None else None
        sentinel_verdicts.append(combine([primary[i]], vlm_stream))

    labels = [log.label for log in test_logs]
    metrics = {name: compute_metrics(v, labels) for name, v in verdicts_by_detector.items()}
    if monitor_verdicts is not None:
        metrics["vlm"] = compute_metrics(monitor_verdicts, labels)
    metrics["sentinel"] = compute_metrics(sentinel_verdicts, labels)

    report = {
        "config": config.to_json_obj(),
        "n_calibration_used": len(cal_logs),
        "calibration": {name: calibrations[name].to_json_obj() for name in config.detectors},
        "metrics": {name: m.to_json_obj() for name, m in metrics.items()},
        "seeds": {"calibration": cal_seeds,
                  "test": [seed for _, seed in test_plan]},
        "test_behaviors": [behavior for behavior, _ in test_plan],
    }

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        all_verdicts = dict(verdicts_by_detector)
        if monitor_verdicts is not None:
            all_verdicts["vlm"] = monitor_verdicts
        all_verdicts["sentinel"] = sentinel_verdicts
        (out_dir / "verdicts.csv").write_text(
            _verdicts_csv(test_plan, labels, all_verdicts), encoding="utf-8")
        (out_dir / "scores.svg").write_text(
            score_chart_svg(series_by_detector[config.sentinel_detector],
                            [label.is_failure for label in labels],
                            calibrations[config.sentinel_detector].gamma,
                            title=config.sentinel_detector),
            encoding="utf-8")
    return report


def _verdicts_csv(test_plan, labels, verdicts_by_detector: dict) -> str:
    names = sorted(verdicts_by_detector)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["index", "seed", "behavior", "label"]
    for name in names:
        header.extend([f"{name}_decision", f"{name}_detection_timestep"])
    writer.writerow(header)
    for i, ((behavior, seed), label) in enumerate(zip(test_plan, labels)):
        row = [i, seed, behavior, label.outcome]
        for name in names:
            verdict = verdicts_by_detector[name][i]
            row.append(verdict.decision)
            row.append("" if verdict.detection_timestep is None else verdict.detection_timestep)
        writer.writerow(row)
    return buf.getvalue()


def score_chart_svg(series_list: Sequence[ScoreSeries], is_failure: Sequence[bool],
                    gamma: float, title: str = "", max_curves: int = 20,
                    width: int = 640, height: int = 360) -> str:
    """Cumulative-score curves with the threshold line, as a standalone SVG.

    Hand-rolled with fixed decimal formatting so identical inputs give
    byte-identical files.
    """
    margin = 40.0
    curves = list(zip(series_list, is_failure))[:max_curves]
    if not curves:
        raise ValueError("need at least one score series")
    t_max = max(max(s.timesteps) for s, _ in curves) or 1
    finite_gamma = gamma if np.isfinite(gamma) else None
    y_candidates = [max(s.cumulative) for s, _ in curves]
    if finite_gamma is not None:
        y_candidates.append(finite_gamma)
    y_max = max(max(y_candidates), 1e-12)

    def sx(t):
        return margin + (width - 2 * margin) * (t / t_max)

    def sy(v):
        return height - margin - (height - 2 * margin) * (v / y_max)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{margin:.1f}" y="20" font-family="monospace" font-size="13">'
             f'cumulative score vs timestep ({title})</text>']
    axis = (f'<line x1="{margin:.1f}" y1="{height - margin:.1f}" x2="{width - margin:.1f}" '
            f'y2="{height - margin:.1f}" stroke="black"/>'
            f'<line x1="{margin:.1f}" y1="{margin:.1f}" x2="{margin:.1f}" '
            f'y2="{height - margin:.1f}" stroke="black"/>')
    parts.append(axis)
    for series, failed in curves:
        color = "#c0392b" if failed else "#2c7fb8"
        points = " ".join(f"{sx(t):.2f},{sy(min(v, y_max)):.2f}"
                          for t, v in zip(series.timesteps, series.cumulative))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{points}"/>')
    if finite_gamma is not None:
        y = sy(finite_gamma)
        parts.append(f'<line x1="{margin:.1f}" y1="{y:.2f}" x2="{width - margin:.1f}" y2="{y:.2f}" '
                     f'stroke="#444444" stroke-dasharray="6,4"/>')
        parts.append(f'<text x="{width - margin - 60:.1f}" y="{y - 5:.2f}" font-family="monospace" '
                     f'font-size="12">threshold</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
