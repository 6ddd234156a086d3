"""Per-timestep baseline score functions and the shared detector registry.

Every detector, temporal-consistency variants included, reduces to a
nonnegative per-inference-step score accumulated by the same cumulative-sum
engine and thresholded by the same conformal machinery. This module holds
the non-consistency scores (embedding distance, diffusion-style losses,
output variance) and the name registry the CLI and harness select from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .distances import BandwidthConfig
from .policy import PolicyOracle
from .rollout import InferenceRecord, RolloutHeader, RolloutLog, apply_mask
from .stac import ScoreSeries, StacConfig, accumulate_scores, stac_step_fn

DETECTOR_NAMES = (
    "stac-mmd", "stac-klf", "stac-klr", "min-l2",
    "mahalanobis", "ddpm", "ddpm-temporal", "recon", "recon-temporal", "outvar",
)

_STAC_DISTANCE_BY_NAME = {
    "stac-mmd": "mmd",
    "stac-klf": "kl_forward",
    "stac-klr": "kl_reverse",
    "min-l2": "min_l2",
}

DEFAULT_DEPTHS = (5, 10, 25, 50)
DEFAULT_NOISE_DRAWS = 10


@dataclass(frozen=True)
class EmbeddingStats:
    """Mean and inverse (ridged) covariance of nominal observation embeddings."""

    mean: np.ndarray
    covariance_inverse: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        inv = np.asarray(self.covariance_inverse, dtype=np.float64)
        if inv.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"covariance_inverse shape {inv.shape} does not match mean")
        if not np.allclose(inv, inv.T, atol=1e-8 * max(1.0, float(np.abs(inv).max()))):
            raise ValueError("covariance_inverse must be symmetric")
        try:
            np.linalg.cholesky((inv + inv.T) / 2.0)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance_inverse must be positive definite") from exc
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance_inverse", (inv + inv.T) / 2.0)

    @classmethod
    def from_mean_cov(cls, mean: np.ndarray, cov: np.ndarray) -> "EmbeddingStats":
        return cls(mean=mean, covariance_inverse=np.linalg.inv(np.asarray(cov, dtype=np.float64)))


def mahalanobis_score(z: np.ndarray, stats: EmbeddingStats) -> float:
    """Mahalanobis distance of an embedding from the nominal statistics."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.shape != stats.mean.shape:
        raise ValueError(f"embedding dim {z.shape[0]} != stats dim {stats.mean.shape[0]}")
    diff = z - stats.mean
    return math.sqrt(max(float(diff @ stats.covariance_inverse @ diff), 0.0))


def _require_oracle(oracle) -> PolicyOracle:
    if oracle is None:
        raise ValueError("this score function needs a policy oracle")
    return oracle


def _noise_pairs(oracle, shape, n_noise_draws, rng_seed):
    if n_noise_draws < 1:
        raise ValueError("n_noise_draws must be >= 1")
    rng = np.random.default_rng(rng_seed)
    steps = rng.integers(0, oracle.schedule.n_steps, size=n_noise_draws)
    return [(int(i), rng.standard_normal(shape)) for i in steps]


def ddpm_loss_score(record: InferenceRecord, state, oracle: PolicyOracle,
                    n_noise_draws: int = DEFAULT_NOISE_DRAWS, rng_seed=0) -> float:
    """Empirical denoising loss of the sampled chunks under the policy.

    Each of the n_noise_draws (i, eps) pairs re-noises the whole batch to
    schedule step i (i uniform over [0, N)) and measures the squared error
    of the predicted noise, averaged over chunks and draws.
    """
    oracle = _require_oracle(oracle)
    return _ddpm_loss(record.chunk_samples, state, oracle, n_noise_draws, rng_seed)


def _ddpm_loss(chunks, state, oracle, n_noise_draws, rng_seed) -> float:
    total = 0.0
    for i, eps in _noise_pairs(oracle, chunks.shape, n_noise_draws, rng_seed):
        abar = oracle.schedule.alpha_bar[i]
        noised = math.sqrt(abar) * chunks + math.sqrt(1.0 - abar) * eps
        pred = oracle.eps(noised, state, i)
        total += float(np.mean(np.sum((eps - pred) ** 2, axis=(1, 2))))
    return total / n_noise_draws


def _stitched_chunks(prev_record: InferenceRecord, curr_record: InferenceRecord) -> np.ndarray:
    """Executed prefix from the previous step glued to each current overlap."""
    k = curr_record.timestep - prev_record.timestep
    h = prev_record.chunk_samples.shape[1]
    if not 0 < k < h:
        raise ValueError(
            f"records not adjacent: timesteps {prev_record.timestep} -> {curr_record.timestep}")
    if curr_record.chunk_samples.shape[1] != h:
        raise ValueError("prediction horizons differ between records")
    prefix = prev_record.executed_chunk()[:k]  # (k, d)
    suffix = curr_record.chunk_samples[:, :h - k]  # (B, h-k, d)
    batch = suffix.shape[0]
    return np.concatenate([np.broadcast_to(prefix, (batch, k, prefix.shape[1])), suffix], axis=1)


def temporal_ddpm_loss_score(prev_record: InferenceRecord, curr_record: InferenceRecord,
                             prev_state, oracle: PolicyOracle,
                             n_noise_draws: int = DEFAULT_NOISE_DRAWS, rng_seed=0) -> float:
    """Denoising loss of committed-prefix chunks, conditioned on the prior state.

    The evaluated chunk replaces each current sample's first k steps with the
    actions actually executed since the previous inference, so chunks that
    renege on the executed plan score poorly even when each marginal looks
    fine on its own.
    """
    oracle = _require_oracle(oracle)
    return _ddpm_loss(_stitched_chunks(prev_record, curr_record), prev_state,
                      oracle, n_noise_draws, rng_seed)


def _validate_depths(depths, n_steps) -> tuple[int, ...]:
    depths = tuple(int(i) for i in depths)
    if not depths:
        raise ValueError("need at least one reconstruction depth")
    for depth in depths:
        if not 1 <= depth < n_steps:
            raise ValueError(f"depth {depth} outside [1, {n_steps})")
    return depths


def reverse_reconstruct(oracle: PolicyOracle, noised, state, depth: int) -> np.ndarray:
    """Deterministic reverse diffusion from schedule step `depth` down to clean.

    Standard posterior-mean updates with zero added noise; the final step
    (alpha_bar of the step before index 0 is defined as 1) maps exactly to
    the clean-chunk estimate.
    """
    alpha_bar = oracle.schedule.alpha_bar
    x = np.asarray(noised, dtype=np.float64)
    for j in range(depth, -1, -1):
        ab_j = alpha_bar[j]
        ab_prev = alpha_bar[j - 1] if j > 0 else 1.0
        alpha_j = ab_j / ab_prev
        pred = oracle.eps(x, state, j)
        x = (x - (1.0 - alpha_j) / math.sqrt(1.0 - ab_j) * pred) / math.sqrt(alpha_j)
    return x


def reconstruction_score(record: InferenceRecord, state, oracle: PolicyOracle,
                         depths: Sequence[int] = DEFAULT_DEPTHS, rng_seed=0) -> float:
    """Squared error between sampled chunks and their re-noised reconstructions."""
    oracle = _require_oracle(oracle)
    return _reconstruction(record.chunk_samples, state, oracle, depths, rng_seed)


def _reconstruction(chunks, state, oracle, depths, rng_seed) -> float:
    depths = _validate_depths(depths, oracle.schedule.n_steps)
    rng = np.random.default_rng(rng_seed)
    total = 0.0
    for depth in depths:
        abar = oracle.schedule.alpha_bar[depth]
        eps = rng.standard_normal(chunks.shape)
        noised = math.sqrt(abar) * chunks + math.sqrt(1.0 - abar) * eps
        recon = reverse_reconstruct(oracle, noised, state, depth)
        total += float(np.mean(np.sum((chunks - recon) ** 2, axis=(1, 2))))
    return total / len(depths)


def temporal_reconstruction_score(prev_record: InferenceRecord, curr_record: InferenceRecord,
                                  prev_state, oracle: PolicyOracle,
                                  depths: Sequence[int] = DEFAULT_DEPTHS, rng_seed=0) -> float:
    """Reconstruction error of committed-prefix chunks under the prior state."""
    oracle = _require_oracle(oracle)
    return _reconstruction(_stitched_chunks(prev_record, curr_record), prev_state,
                           oracle, depths, rng_seed)


def output_variance_score(record: InferenceRecord,
                          action_mask: Optional[Sequence[bool]] = None) -> float:
    """Mean per-dimension sample variance across the chunk batch.

    Population (n-denominator) convention over the masked, flattened chunk
    dimensions.
    """
    if record.batch_size < 2:
        raise ValueError("output variance needs at least 2 sampled chunks")
    if action_mask is None:
        chunks = record.chunk_samples
    else:
        chunks = apply_mask(record, action_mask)
    flat = chunks.reshape(record.batch_size, -1)
    return float(np.mean(flat.var(axis=0)))


@dataclass
class DetectorContext:
    """Everything a detector might need beyond the log itself."""

    bandwidths: BandwidthConfig = field(default_factory=BandwidthConfig)
    oracle: Optional[PolicyOracle] = None
    embedding_stats: Optional[EmbeddingStats] = None
    n_noise_draws: int = DEFAULT_NOISE_DRAWS
    depths: tuple = DEFAULT_DEPTHS
    seed: int = 0


@dataclass(frozen=True)
class ScoreFunction:
    """A named per-inference-step score, ready for the cumulative-sum engine."""

    name: str
    step_fn: Callable[[RolloutLog, int], float]

    def score(self, log: RolloutLog, j: int) -> float:
        return self.step_fn(log, j)


def _embedding_at(log: RolloutLog, j: int) -> np.ndarray:
    embedding = log.records[j].embedding
    if embedding is None:
        raise ValueError(f"record at t={log.records[j].timestep} has no embedding")
    return embedding


def _step_seed(base: int, j: int):
    return np.random.SeedSequence((int(base), int(j)))


def make_score_function(name: str, header: RolloutHeader,
                        ctx: Optional[DetectorContext] = None) -> ScoreFunction:
    """Resolve a registry name to its per-step score closure."""
    ctx = ctx or DetectorContext()
    if name in _STAC_DISTANCE_BY_NAME:
        config = StacConfig(distance=_STAC_DISTANCE_BY_NAME[name], bandwidths=ctx.bandwidths)
        return ScoreFunction(name=name, step_fn=stac_step_fn(config, header))

    if name == "mahalanobis":
        def step(log, j):
            if ctx.embedding_stats is None:
                raise ValueError("mahalanobis needs calibrated embedding stats")
            return mahalanobis_score(_embedding_at(log, j), ctx.embedding_stats)
    elif name == "ddpm":
        def step(log, j):
            return ddpm_loss_score(log.records[j], _embedding_at(log, j), ctx.oracle,
                                   ctx.n_noise_draws, _step_seed(ctx.seed, j))
    elif name == "ddpm-temporal":
        def step(log, j):
            if j == 0:
                return 0.0
            return temporal_ddpm_loss_score(log.records[j - 1], log.records[j],
                                            _embedding_at(log, j - 1), ctx.oracle,
                                            ctx.n_noise_draws, _step_seed(ctx.seed, j))
    elif name == "recon":
        def step(log, j):
            return reconstruction_score(log.records[j], _embedding_at(log, j), ctx.oracle,
                                        ctx.depths, _step_seed(ctx.seed, j))
    elif name == "recon-temporal":
        def step(log, j):
            if j == 0:
                return 0.0
            return temporal_reconstruction_score(log.records[j - 1], log.records[j],
                                                 _embedding_at(log, j - 1), ctx.oracle,
                                                 ctx.depths, _step_seed(ctx.seed, j))
    elif name == "outvar":
        def step(log, j):
            return output_variance_score(log.records[j], log.header.action_mask)
    else:
        raise ValueError(f"unknown detector {name!r}; known: {', '.join(DETECTOR_NAMES)}")
    return ScoreFunction(name=name, step_fn=step)


def score_log(name: str, log: RolloutLog, ctx: Optional[DetectorContext] = None) -> ScoreSeries:
    """Score one rollout with a registry detector through the shared engine."""
    fn = make_score_function(name, log.header, ctx)
    return accumulate_scores(log, fn.step_fn)
