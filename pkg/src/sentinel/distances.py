"""Distance estimators between sample sets of flattened action sequences.

All estimators operate on n x d arrays of flattened overlap slices. The RBF
kernel used by the MMD estimator is exp(-||a-b||^2 / b1) (no factor 2 in the
denominator), while the KDE kernel is a normalized Gaussian with standard
deviation b2 per dimension; the two conventions differ on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

BANDWIDTH_FALLBACK = 1e-8

MEDIAN_HEURISTIC = "median_heuristic"
MAX_EIG_COV = "max_eig_cov"
INV_DIM = "inv_dim"


@dataclass(frozen=True)
class SampleSet:
    """A validated n x d set of flattened action-sequence samples."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValueError(f"sample set must be 2-D (n x d), got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("sample set needs at least one point")
        if not np.isfinite(pts).all():
            raise ValueError("sample set contains non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def as_sample_set(x: Union[SampleSet, np.ndarray, list]) -> SampleSet:
    return x if isinstance(x, SampleSet) else SampleSet(np.asarray(x))


def _pooled(x, y) -> np.ndarray:
    x, y = as_sample_set(x), as_sample_set(y)
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    return np.vstack([x.points, y.points])


def median_heuristic(x, y) -> float:
    """Median of pairwise squared distances over the pooled set.

    All unordered pairs i != j contribute. Falls back to 1e-8 when the
    median is zero (e.g. a constant-output policy), so downstream kernels
    stay finite.
    """
    pooled = _pooled(x, y)
    if pooled.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 pooled points")
    med = float(np.median(pdist(pooled, metric="sqeuclidean")))
    return med if med > 0.0 else BANDWIDTH_FALLBACK


def kde_bandwidth_max_eig(x, y) -> float:
    """Square root of the largest eigenvalue of the pooled sample covariance."""
    pooled = _pooled(x, y)
    if pooled.shape[0] < 2:
        raise ValueError("covariance bandwidth needs at least 2 pooled points")
    cov = np.atleast_2d(np.cov(pooled, rowvar=False, ddof=1))
    top = float(np.linalg.eigvalsh(cov)[-1])
    bw = math.sqrt(max(top, 0.0))
    return bw if bw > 0.0 else BANDWIDTH_FALLBACK


def mmd_rbf(x, y, bandwidth: float) -> float:
    """Biased V-statistic of squared MMD under the RBF kernel.

    Uses means over all n_x^2, n_y^2 and n_x*n_y kernel evaluations
    (diagonal terms included), which keeps the estimate nonnegative; the
    result is additionally clamped at 0 against floating-point dust.
    """
    x, y = as_sample_set(x), as_sample_set(y)
    if x.dim != y.dim:
        raise ValueError(f"dimension mismatch: {x.dim} vs {y.dim}")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    kxx = np.exp(-cdist(x.points, x.points, "sqeuclidean") / bandwidth).mean()
    kyy = np.exp(-cdist(y.points, y.points, "sqeuclidean") / bandwidth).mean()
    kxy = np.exp(-cdist(x.points, y.points, "sqeuclidean") / bandwidth).mean()
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


def kde_log_density(fit, queries, bandwidth: float) -> np.ndarray:
    """Log density of an equal-weight Gaussian KDE at each query point.

    The mixture has one component per fit point with stddev `bandwidth` in
    every dimension, normalizing constant included. Evaluation goes through
    log-sum-exp, so extremely distant queries underflow gracefully to very
    negative (still finite) values.
    """
    fit, queries = as_sample_set(fit), as_sample_set(queries)
    if fit.dim != queries.dim:
        raise ValueError(f"dimension mismatch: {fit.dim} vs {queries.dim}")
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    sq = cdist(queries.points, fit.points, "sqeuclidean")
    log_norm = math.log(fit.n) + 0.5 * fit.dim * math.log(2.0 * math.pi * bandwidth ** 2)
    return logsumexp(-sq / (2.0 * bandwidth ** 2), axis=1) - log_norm


def kl_forward(prev, curr, bandwidth: float) -> float:
    """Plug-in KDE estimate of KL(curr || prev), averaged over curr's points.

    Self terms are included on both sides; the raw estimate can dip below
    zero, so it is clamped at 0 to keep cumulative scores monotone.
    """
    prev, curr = as_sample_set(prev), as_sample_set(curr)
    log_p = kde_log_density(curr, curr, bandwidth)
    log_q = kde_log_density(prev, curr, bandwidth)
    return max(float(np.mean(log_p - log_q)), 0.0)


def kl_reverse(prev, curr, bandwidth: float) -> float:
    """Plug-in KDE estimate of KL(prev || curr), averaged over prev's points.

    Identical to kl_forward with the two roles swapped, and implemented that
    way so the identity holds exactly.
    """
    return kl_forward(curr, prev, bandwidth)


def min_l2(executed_overlap, curr) -> float:
    """Minimum Euclidean distance from the executed overlap to any sampled row."""
    executed = np.asarray(executed_overlap, dtype=np.float64).ravel()
    curr = as_sample_set(curr)
    if executed.shape[0] != curr.dim:
        raise ValueError(f"dimension mismatch: {executed.shape[0]} vs {curr.dim}")
    if not np.isfinite(executed).all():
        raise ValueError("executed overlap contains non-finite values")
    return float(np.min(np.linalg.norm(curr.points - executed, axis=1)))


@dataclass(frozen=True)
class BandwidthConfig:
    """Bandwidth selection policy for the MMD (b1) and KDE (b2) kernels.

    Each field is either a fixed positive float or a named heuristic:
    `median_heuristic` / `inv_dim` (1 / masked action dim) for MMD, and
    `max_eig_cov` for the KDE. Heuristics are resolved per overlap pair.
    """

    mmd_bandwidth: Union[float, str] = MEDIAN_HEURISTIC
    kde_bandwidth: Union[float, str] = MAX_EIG_COV

    def __post_init__(self):
        for name, allowed in (("mmd_bandwidth", (MEDIAN_HEURISTIC, INV_DIM)),
                              ("kde_bandwidth", (MAX_EIG_COV,))):
            value = getattr(self, name)
            if isinstance(value, str):
                if value not in allowed:
                    raise ValueError(f"{name} must be a positive number or one of {allowed}")
            else:
                value = float(value)
                if not value > 0:
                    raise ValueError(f"fixed {name} must be > 0, got {value}")
                object.__setattr__(self, name, value)

    def resolve_mmd(self, x, y, masked_dim: int) -> float:
        if self.mmd_bandwidth == MEDIAN_HEURISTIC:
            return median_heuristic(x, y)
        if self.mmd_bandwidth == INV_DIM:
            return 1.0 / masked_dim
        return float(self.mmd_bandwidth)

    def resolve_kde(self, x, y) -> float:
        if self.kde_bandwidth == MAX_EIG_COV:
            return kde_bandwidth_max_eig(x, y)
        return float(self.kde_bandwidth)

    def to_json_obj(self) -> dict:
        return {"mmd_bandwidth": self.mmd_bandwidth, "kde_bandwidth": self.kde_bandwidth}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BandwidthConfig":
        if not isinstance(obj, dict):
            raise ValueError("bandwidth config must be a JSON object")
        unknown = set(obj) - {"mmd_bandwidth", "kde_bandwidth"}
        if unknown:
            raise ValueError(f"unknown bandwidth fields {sorted(unknown)}")
        kwargs = {}
        for key in ("mmd_bandwidth", "kde_bandwidth"):
            if key in obj:
                kwargs[key] = obj[key]
        return cls(**kwargs)
