"""Stochastic action-chunk policy interface and a tractable GMM stand-in.

The synthetic policy samples chunks from a state-conditioned Gaussian
mixture whose modes steer an integrator toward per-mode attractors. Because
the mixture is analytically known, the Bayes-optimal noise prediction for
re-noised chunks has a closed form, which gives the diffusion-style score
functions an exact oracle to evaluate against. Behavior switches corrupt
sampling only; the oracle always reflects the nominal mixture.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from .rollout import InferenceRecord, RolloutHeader, RolloutLabel, RolloutLog

BEHAVIORS = ("consistent", "mode_resample", "constant_stall", "drift")

DEFAULT_TASK_DESCRIPTION = (
    "push the supply cart to either of the two marked loading docks and "
    "bring it to rest inside the dock circle"
)


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions (alpha-bar) for N denoising iterations."""

    alpha_bar: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(a) for a in self.alpha_bar)
        if len(values) < 1:
            raise ValueError("schedule needs at least one step")
        if not all(0.0 < a < 1.0 for a in values):
            raise ValueError("alpha_bar values must lie strictly within (0, 1)")
        if not all(later < earlier for earlier, later in zip(values, values[1:])):
            raise ValueError("alpha_bar must be strictly decreasing")
        object.__setattr__(self, "alpha_bar", values)

    @property
    def n_steps(self) -> int:
        return len(self.alpha_bar)

    @classmethod
    def default_linear(cls, n_steps: int = 100, start: float = 0.9999,
                       end: float = 0.02) -> "NoiseSchedule":
        return cls(tuple(np.linspace(start, end, n_steps)))


class PolicyOracle(abc.ABC):
    """What every detector needs from a policy: sampler, noise predictor, encoder."""

    schedule: NoiseSchedule

    @abc.abstractmethod
    def sample(self, state: np.ndarray, batch_size: int) -> np.ndarray:
        """Draw batch_size action chunks of shape (B, h, action_dim)."""

    @abc.abstractmethod
    def eps(self, noised_chunk: np.ndarray, state: np.ndarray, i: int) -> np.ndarray:
        """Predict the noise inside a chunk re-noised to schedule step i."""

    @abc.abstractmethod
    def encode(self, observation: np.ndarray) -> np.ndarray:
        """Map an observation to the embedding recorded in logs."""


@dataclass
class GmmMode:
    """One mixture mode: exponential approach toward `attractor` at rate `gain`.

    A custom mean_fn(state, horizon) -> (h, d) array overrides the attractor
    parameterization when set.
    """

    weight: float
    stddev: float
    attractor: np.ndarray
    gain: float = 0.05
    mean_fn: Optional[Callable[[np.ndarray, int], np.ndarray]] = None

    def __post_init__(self):
        self.weight = float(self.weight)
        self.stddev = float(self.stddev)
        self.gain = float(self.gain)
        if self.weight <= 0:
            raise ValueError("mode weight must be positive")
        if self.stddev <= 0:
            raise ValueError("mode stddev must be positive")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must be in (0, 1]")
        self.attractor = np.asarray(self.attractor, dtype=np.float64).ravel()

    def chunk_mean(self, state: np.ndarray, horizon: int) -> np.ndarray:
        if self.mean_fn is not None:
            mean = np.asarray(self.mean_fn(state, horizon), dtype=np.float64)
            if mean.shape != (horizon, self.attractor.shape[0]):
                raise ValueError(f"mean_fn returned shape {mean.shape}")
            return mean
        # Open-loop plan of an exponential approach: following the plan from
        # `state` makes step j of the next plan coincide with step j+k of
        # this one, which is what keeps nominal rollouts temporally
        # consistent under re-planning.
        delta = self.attractor - np.asarray(state, dtype=np.float64).ravel()
        decay = self.gain * (1.0 - self.gain) ** np.arange(horizon)
        return decay[:, None] * delta[None, :]


def _sharpened(weights: np.ndarray, preferred: int, dominance: float) -> np.ndarray:
    if weights.shape[0] == 1:
        return weights.copy()
    out = np.empty_like(weights)
    others = np.delete(weights, preferred)
    out[preferred] = dominance
    rest = np.delete(np.arange(weights.shape[0]), preferred)
    out[rest] = (1.0 - dominance) * others / others.sum()
    return out


class SyntheticGmmPolicy(PolicyOracle):
    """State-conditioned GMM policy with switchable runtime behaviors.

    `consistent` commits to one preferred mode per episode (weights fixed),
    `mode_resample` re-draws the preference at every inference step,
    `constant_stall` emits near-zero chunks, and `drift` emits a constant
    offset chunk. The noise-prediction oracle ignores the behavior and
    answers for the nominal mixture.
    """

    def __init__(self, modes: Sequence[GmmMode], horizon: int, action_dim: int,
                 behavior: str = "consistent", seed: int = 0, dominance: float = 0.9,
                 stall_noise: float = 1e-4, drift_step: Optional[Sequence[float]] = None,
                 schedule: Optional[NoiseSchedule] = None):
        if behavior not in BEHAVIORS:
            raise ValueError(f"behavior must be one of {BEHAVIORS}")
        if not modes:
            raise ValueError("need at least one mode")
        total = sum(m.weight for m in modes)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"mode weights must sum to 1, got {total}")
        if not 0.0 < dominance < 1.0:
            raise ValueError("dominance must be in (0, 1)")
        for mode in modes:
            if mode.attractor.shape[0] != action_dim:
                raise ValueError("mode attractor dimension != action_dim")
        self.modes = list(modes)
        self.horizon = int(horizon)
        self.action_dim = int(action_dim)
        self.behavior = behavior
        self.dominance = float(dominance)
        self.stall_noise = float(stall_noise)
        self.drift_step = (np.zeros(action_dim) if drift_step is None
                           else np.asarray(drift_step, dtype=np.float64).ravel())
        if self.drift_step.shape[0] != action_dim:
            raise ValueError("drift_step dimension != action_dim")
        self.schedule = schedule or NoiseSchedule.default_linear()
        self.base_weights = np.array([m.weight for m in self.modes])
        self.preferred_mode = 0
        self.last_mode_assignments: Optional[np.ndarray] = None
        self.reset(np.random.default_rng(seed))

    def reset(self, rng: np.random.Generator) -> None:
        """Start a new episode: take ownership of `rng`, draw the preference."""
        self._rng = rng
        self.preferred_mode = int(self._rng.choice(len(self.modes), p=self.base_weights))

    def _current_weights(self) -> np.ndarray:
        if self.behavior == "mode_resample":
            self.preferred_mode = int(self._rng.choice(len(self.modes), p=self.base_weights))
        return _sharpened(self.base_weights, self.preferred_mode, self.dominance)

    def sample_with_modes(self, state, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        """Like sample(), but also return the per-chunk mode assignments (-1 = none)."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        state = np.asarray(state, dtype=np.float64).ravel()
        h, d = self.horizon, self.action_dim
        noise = self._rng.standard_normal((batch_size, h, d))
        if self.behavior == "constant_stall":
            return noise * self.stall_noise, np.full(batch_size, -1)
        if self.behavior == "drift":
            mean = np.tile(self.drift_step, (h, 1))
            return mean[None] + noise * self.stall_noise, np.full(batch_size, -1)
        weights = self._current_weights()
        assignments = self._rng.choice(len(self.modes), p=weights, size=batch_size)
        chunks = np.empty((batch_size, h, d))
        means = [mode.chunk_mean(state, h) for mode in self.modes]
        for b, m in enumerate(assignments):
            chunks[b] = means[m] + noise[b] * self.modes[m].stddev
        self.last_mode_assignments = assignments
        return chunks, assignments

    def sample(self, state, batch_size: int) -> np.ndarray:
        chunks, _ = self.sample_with_modes(state, batch_size)
        return chunks

    def eps(self, noised_chunk, state, i: int) -> np.ndarray:
        return gmm_exact_eps(self, noised_chunk, state, i)

    def encode(self, observation) -> np.ndarray:
        return np.asarray(observation, dtype=np.float64).ravel().copy()


def gmm_sample(policy: SyntheticGmmPolicy, state, batch_size: int) -> np.ndarray:
    """Draw a batch of chunks from the policy under its current behavior."""
    return policy.sample(state, batch_size)


def gmm_exact_eps(policy: SyntheticGmmPolicy, noised_chunk, state, i: int) -> np.ndarray:
    """Bayes-optimal noise prediction for the nominal mixture.

    Re-noising a GMM draw to schedule step i yields another GMM (means
    scaled by sqrt(abar), per-dimension variances abar*sigma^2 + 1 - abar),
    so the posterior mean over the clean chunk is a responsibility-weighted
    blend of per-mode linear estimates, and the predicted noise follows as
    eps_hat = (x - sqrt(abar) * E[a0 | x]) / sqrt(1 - abar).
    """
    schedule = policy.schedule
    if not 0 <= i < schedule.n_steps:
        raise ValueError(f"denoise step {i} outside [0, {schedule.n_steps})")
    abar = schedule.alpha_bar[i]
    sqrt_abar = math.sqrt(abar)
    h, d = policy.horizon, policy.action_dim
    x = np.asarray(noised_chunk, dtype=np.float64)
    if x.shape[-2:] != (h, d):
        raise ValueError(f"noised chunk must end in shape ({h}, {d}), got {x.shape}")
    lead = x.shape[:-2]
    flat = x.reshape(-1, h * d)  # (n, V)

    state = np.asarray(state, dtype=np.float64).ravel()
    mu = np.stack([m.chunk_mean(state, h).ravel() for m in policy.modes])  # (M, V)
    sig2 = np.array([m.stddev ** 2 for m in policy.modes])  # (M,)
    s2 = abar * sig2 + (1.0 - abar)  # marginal variance per dim, per mode
    v = flat.shape[1]

    diff = flat[:, None, :] - sqrt_abar * mu[None, :, :]  # (n, M, V)
    sq = np.einsum("nmv,nmv->nm", diff, diff)
    log_resp = (np.log(policy.base_weights)[None, :]
                - 0.5 * sq / s2[None, :]
                - 0.5 * v * np.log(2.0 * math.pi * s2)[None, :])
    log_resp -= logsumexp(log_resp, axis=1, keepdims=True)
    resp = np.exp(log_resp)  # (n, M)

    shrink = (sqrt_abar * sig2 / s2)[None, :, None]  # per-mode linear coefficient
    post_mean_per_mode = mu[None, :, :] + shrink * diff  # (n, M, V)
    post_mean = np.einsum("nm,nmv->nv", resp, post_mean_per_mode)

    eps_hat = (flat - sqrt_abar * post_mean) / math.sqrt(1.0 - abar)
    return eps_hat.reshape(*lead, h, d)


@dataclass
class ScenarioConfig:
    """Everything needed to generate synthetic rollouts for one scenario."""

    action_dim: int = 2
    prediction_horizon: int = 8
    execution_horizon: int = 4
    episode_limit: int = 64
    step_duration: float = 0.25
    batch_size: int = 32
    attractors: tuple = ((2.5, 1.5), (2.5, -1.5))
    mode_weights: Optional[tuple] = None  # None = uniform
    gain: float = 0.05
    noise_std: float = 0.01
    dominance: float = 0.9
    stall_noise: float = 1e-4
    drift_step: tuple = (-0.03, 0.03)
    start: tuple = (0.0, 0.0)
    start_jitter: float = 0.05
    goal_radius: float = 0.3
    action_mask: Optional[tuple] = None  # None = all dimensions included
    task_description: str = DEFAULT_TASK_DESCRIPTION
    task_time_limit: Optional[float] = None  # None = episode_limit * step_duration
    n_denoise_steps: int = 100
    record_embeddings: bool = True
    record_frames: bool = True

    def __post_init__(self):
        self.attractors = tuple(tuple(float(v) for v in a) for a in self.attractors)
        if not self.attractors:
            raise ValueError("need at least one attractor")
        for a in self.attractors:
            if len(a) != self.action_dim:
                raise ValueError("attractor dimension != action_dim")
        if self.mode_weights is None:
            self.mode_weights = tuple([1.0 / len(self.attractors)] * len(self.attractors))
        else:
            self.mode_weights = tuple(float(w) for w in self.mode_weights)
        if len(self.mode_weights) != len(self.attractors):
            raise ValueError("mode_weights length != number of attractors")
        if self.task_time_limit is None:
            self.task_time_limit = self.episode_limit * self.step_duration

    def header(self) -> RolloutHeader:
        mask = self.action_mask if self.action_mask is not None else (True,) * self.action_dim
        return RolloutHeader(
            action_dim=self.action_dim,
            prediction_horizon=self.prediction_horizon,
            execution_horizon=self.execution_horizon,
            episode_limit=self.episode_limit,
            step_duration=self.step_duration,
            action_mask=tuple(mask),
            task_description=self.task_description,
            task_time_limit=float(self.task_time_limit),
        )

    def build_policy(self, behavior: str = "consistent", seed: int = 0) -> SyntheticGmmPolicy:
        modes = [GmmMode(weight=w, stddev=self.noise_std,
                         attractor=np.array(a), gain=self.gain)
                 for w, a in zip(self.mode_weights, self.attractors)]
        return SyntheticGmmPolicy(
            modes, horizon=self.prediction_horizon, action_dim=self.action_dim,
            behavior=behavior, seed=seed, dominance=self.dominance,
            stall_noise=self.stall_noise, drift_step=self.drift_step,
            schedule=NoiseSchedule.default_linear(self.n_denoise_steps),
        )

    def to_json_obj(self) -> dict:
        return {
            "action_dim": self.action_dim,
            "prediction_horizon": self.prediction_horizon,
            "execution_horizon": self.execution_horizon,
            "episode_limit": self.episode_limit,
            "step_duration": self.step_duration,
            "batch_size": self.batch_size,
            "attractors": [list(a) for a in self.attractors],
            "mode_weights": list(self.mode_weights),
            "gain": self.gain,
            "noise_std": self.noise_std,
            "dominance": self.dominance,
            "stall_noise": self.stall_noise,
            "drift_step": list(self.drift_step),
            "start": list(self.start),
            "start_jitter": self.start_jitter,
            "goal_radius": self.goal_radius,
            "action_mask": None if self.action_mask is None else list(self.action_mask),
            "task_description": self.task_description,
            "task_time_limit": self.task_time_limit,
            "n_denoise_steps": self.n_denoise_steps,
            "record_embeddings": self.record_embeddings,
            "record_frames": self.record_frames,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ScenarioConfig":
        if not isinstance(obj, dict):
            raise ValueError("scenario config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown scenario fields {sorted(unknown)}")
        kwargs = dict(obj)
        for key in ("attractors",):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(tuple(v) for v in kwargs[key])
        for key in ("mode_weights", "drift_step", "start", "action_mask"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def default_goal_label(states: Sequence[np.ndarray], config: ScenarioConfig) -> RolloutLabel:
    """Success iff the terminal state parks inside any attractor's goal ball.

    The return is the binary task-completion reward, so failure is exactly
    `return < 1`.
    """
    terminal = np.asarray(states[-1], dtype=np.float64)
    closest = min(float(np.linalg.norm(terminal - np.asarray(a))) for a in config.attractors)
    reached = closest <= config.goal_radius
    return RolloutLabel(
        outcome="success" if reached else "failure",
        return_value=1.0 if reached else 0.0,
        return_threshold=1.0,
    )


def generate_rollout(policy: SyntheticGmmPolicy, params: ScenarioConfig,
                     label_rule: Optional[Callable] = None, seed: int = 0) -> RolloutLog:
    """Run one closed-loop episode on the integrator environment.

    At each inference step the policy samples a chunk batch; the executed
    chunk is the first batch row from the currently preferred mode (row 0
    for stall/drift), and the state advances by each executed action in
    turn. Fully reproducible from `seed`.
    """
    ss = np.random.SeedSequence(seed)
    env_rng, policy_rng = (np.random.default_rng(c) for c in ss.spawn(2))
    policy.reset(policy_rng)
    label_rule = label_rule or default_goal_label

    header = params.header()
    h, k, big_h = params.prediction_horizon, params.execution_horizon, params.episode_limit
    state = np.asarray(params.start, dtype=np.float64) + \
        env_rng.standard_normal(params.action_dim) * params.start_jitter
    states = [state.copy()]
    records = []
    t = 0
    while t < big_h:
        chunks, assignments = policy.sample_with_modes(state, params.batch_size)
        executed_index = 0
        if policy.behavior in ("consistent", "mode_resample"):
            hits = np.nonzero(assignments == policy.preferred_mode)[0]
            if hits.size:
                executed_index = int(hits[0])
        records.append(InferenceRecord(
            timestep=t,
            chunk_samples=chunks,
            executed_index=executed_index,
            embedding=policy.encode(state) if params.record_embeddings else None,
            frame_ref=f"frames/ep{seed:05d}/t{t:04d}.png" if params.record_frames else None,
        ))
        for step in range(min(k, big_h - t)):
            state = state + chunks[executed_index][step]
            states.append(state.copy())
        t += k
    return RolloutLog(header=header, records=records, label=label_rule(states, params))
