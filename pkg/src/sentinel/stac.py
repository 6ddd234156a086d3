"""Temporal consistency scoring over action-chunk overlaps.

Consecutive inference steps predict the same h-k environment steps twice:
the tail of the chunk sampled at t and the head of the chunk sampled at
t+k. Scoring a rollout turns the per-step distance between those two
sampled marginals into a cumulative score that only grows, which is what
makes a single calibrated threshold sufficient for online detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .distances import (
    BandwidthConfig,
    SampleSet,
    kl_forward,
    kl_reverse,
    min_l2,
    mmd_rbf,
)
from .rollout import InferenceRecord, InvalidLogError, RolloutHeader, RolloutLog, apply_mask

STAC_DISTANCES = ("mmd", "kl_forward", "kl_reverse", "min_l2")


@dataclass(frozen=True)
class OverlapPair:
    """The two sampled marginals covering environment steps [t+k, t+h-1].

    `prev` holds chunk indices [k, h-1] of every chunk sampled at t, `curr`
    chunk indices [0, h-k-1] of every chunk sampled at t+k; both flattened
    time-major then action-dimension.
    """

    prev: SampleSet
    curr: SampleSet
    at_timestep: int

    def __post_init__(self):
        if self.prev.dim != self.curr.dim:
            raise InvalidLogError(
                f"overlap row dims differ: {self.prev.dim} vs {self.curr.dim}")


@dataclass
class ScoreSeries:
    """Per-inference-step scores and their running sum, aligned to timesteps."""

    timesteps: list[int]
    step_scores: list[float]
    cumulative: list[float]

    def __post_init__(self):
        n = len(self.timesteps)
        if not (len(self.step_scores) == len(self.cumulative) == n):
            raise ValueError("series fields must have equal lengths")
        running = 0.0
        for j, (step, cum) in enumerate(zip(self.step_scores, self.cumulative)):
            if step < 0:
                raise ValueError(f"negative step score at index {j}")
            running += step
            if abs(cum - running) > 1e-12 * max(1.0, abs(running)):
                raise ValueError(f"cumulative[{j}] inconsistent with step scores")
        if any(b < a for a, b in zip(self.cumulative, self.cumulative[1:])):
            raise ValueError("cumulative scores must be nondecreasing")

    @property
    def terminal(self) -> float:
        return self.cumulative[-1]

    def to_rows(self) -> list[tuple[int, float, float]]:
        return list(zip(self.timesteps, self.step_scores, self.cumulative))


@dataclass(frozen=True)
class StacConfig:
    """Which overlap distance to accumulate and how to pick bandwidths."""

    distance: str = "mmd"
    bandwidths: BandwidthConfig = field(default_factory=BandwidthConfig)
    mask: Optional[tuple[bool, ...]] = None  # None = use the header's mask

    def __post_init__(self):
        if self.distance not in STAC_DISTANCES:
            raise ValueError(f"distance must be one of {STAC_DISTANCES}")
        if self.mask is not None:
            object.__setattr__(self, "mask", tuple(bool(b) for b in self.mask))
            if not any(self.mask):
                raise ValueError("mask selects no dimensions")

    def resolved_mask(self, header: RolloutHeader) -> tuple[bool, ...]:
        if self.mask is None:
            return header.action_mask
        if len(self.mask) != header.action_dim:
            raise InvalidLogError(
                f"config mask length {len(self.mask)} != action_dim {header.action_dim}")
        return self.mask


def _flatten_overlap(chunks: np.ndarray) -> np.ndarray:
    # (B, steps, d) -> (B, steps*d), time-major within each row
    return chunks.reshape(chunks.shape[0], -1)


def extract_overlap(prev: InferenceRecord, curr: InferenceRecord,
                    header: RolloutHeader, mask: Optional[Sequence[bool]] = None) -> OverlapPair:
    """Slice two adjacent records down to their shared h-k overlap steps."""
    k = header.execution_horizon
    if curr.timestep != prev.timestep + k:
        raise InvalidLogError(
            f"records not adjacent: {prev.timestep} -> {curr.timestep} (k={k})")
    mask = header.action_mask if mask is None else mask
    h = header.prediction_horizon
    prev_masked = apply_mask(prev, mask)
    curr_masked = apply_mask(curr, mask)
    return OverlapPair(
        prev=SampleSet(_flatten_overlap(prev_masked[:, k:h, :])),
        curr=SampleSet(_flatten_overlap(curr_masked[:, 0:h - k, :])),
        at_timestep=curr.timestep,
    )


def executed_overlap_slice(prev: InferenceRecord, header: RolloutHeader,
                           mask: Optional[Sequence[bool]] = None) -> np.ndarray:
    """Flattened overlap slice of the chunk that was actually executed at t."""
    mask = header.action_mask if mask is None else mask
    masked = apply_mask(prev, mask)
    k, h = header.execution_horizon, header.prediction_horizon
    return masked[prev.executed_index, k:h, :].ravel()


def accumulate_scores(log: RolloutLog,
                      step_fn: Callable[[RolloutLog, int], float]) -> ScoreSeries:
    """Shared cumulative-score engine: every detector routes through here.

    `step_fn(log, j)` returns the nonnegative score that becomes known at
    inference step j; the series pairs each timestep with the running sum.
    """
    timesteps, steps, cumulative = [], [], []
    running = 0.0
    for j, record in enumerate(log.records):
        value = float(step_fn(log, j))
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"step score at index {j} must be finite and >= 0, got {value}")
        running += value
        timesteps.append(record.timestep)
        steps.append(value)
        cumulative.append(running)
    return ScoreSeries(timesteps=timesteps, step_scores=steps, cumulative=cumulative)


def stac_step_fn(config: StacConfig, header: RolloutHeader) -> Callable[[RolloutLog, int], float]:
    """Build the per-step overlap-distance function for one config."""
    mask = config.resolved_mask(header)
    masked_dim = sum(mask)
    distance = config.distance
    bandwidths = config.bandwidths

    def step(log: RolloutLog, j: int) -> float:
        if j == 0:
            return 0.0  # nothing overlaps the first inference step
        prev, curr = log.records[j - 1], log.records[j]
        pair = extract_overlap(prev, curr, header, mask)
        if distance == "mmd":
            bw = bandwidths.resolve_mmd(pair.prev, pair.curr, masked_dim)
            return mmd_rbf(pair.prev, pair.curr, bw)
        if distance == "kl_forward":
            bw = bandwidths.resolve_kde(pair.prev, pair.curr)
            return kl_forward(pair.prev, pair.curr, bw)
        if distance == "kl_reverse":
            bw = bandwidths.resolve_kde(pair.prev, pair.curr)
            return kl_reverse(pair.prev, pair.curr, bw)
        executed = executed_overlap_slice(prev, header, mask)
        return min_l2(executed, pair.curr)

    return step


def score_rollout(log: RolloutLog, config: StacConfig) -> ScoreSeries:
    """Score a full rollout with one of the overlap-distance variants.

    Entry j of the result is the distance between the marginals sampled at
    inference steps j-1 and j (zero at j=0), plus the running cumulative
    score; bandwidth heuristics are resolved per overlap pair.
    """
    if log.n_records < 2:
        raise InvalidLogError("scoring needs at least 2 inference records")
    return accumulate_scores(log, stac_step_fn(config, log.header))


def detect_online(series: ScoreSeries, gamma: float) -> Optional[int]:
    """First timestep whose cumulative score strictly exceeds gamma, if any."""
    for t, value in zip(series.timesteps, series.cumulative):
        if value > gamma:
            return t
    return None
