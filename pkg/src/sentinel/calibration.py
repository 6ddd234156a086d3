"""Conformal threshold calibration from success-only rollouts.

Terminal cumulative scores of M nominal rollouts determine a threshold
gamma such that a fresh nominal rollout exceeds it with probability at
most delta (marginally over the calibration draw). Small M can push the
required quantile index past M, in which case gamma is +inf and the
detector never fires; callers should surface that as a warning.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_DELTA = 0.05


@dataclass(frozen=True)
class CalibrationResult:
    """Threshold plus the audit trail that produced it."""

    gamma: float
    delta: float
    m: int
    quantile_index: int
    terminal_scores: tuple[float, ...]  # sorted ascending

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.gamma)

    def to_json_obj(self) -> dict:
        return {
            "gamma": "inf" if self.is_infinite else self.gamma,
            "delta": self.delta,
            "m": self.m,
            "quantile_index": self.quantile_index,
            "terminal_scores": list(self.terminal_scores),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_json_obj(), **kwargs)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "CalibrationResult":
        gamma = obj["gamma"]
        if gamma == "inf":
            gamma = math.inf
        return cls(
            gamma=float(gamma),
            delta=float(obj["delta"]),
            m=int(obj["m"]),
            quantile_index=int(obj["quantile_index"]),
            terminal_scores=tuple(float(s) for s in obj["terminal_scores"]),
        )


def conformal_threshold(terminal_scores: Sequence[float],
                        delta: float = DEFAULT_DELTA) -> CalibrationResult:
    """Pick gamma as the ceil((M+1)(1-delta))-th smallest terminal score.

    When that rank exceeds M the guarantee cannot be met by any finite
    threshold and gamma is +inf. Ties occupy consecutive ranks (plain order
    statistics).
    """
    scores = [float(s) for s in terminal_scores]
    if not scores:
        raise ValueError("calibration needs at least one terminal score")
    if not all(math.isfinite(s) for s in scores):
        raise ValueError("terminal scores must be finite")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must be in (0, 1), got {delta}")
    m = len(scores)
    quantile_index = math.ceil((m + 1) * (1.0 - delta))
    ordered = sorted(scores)
    gamma = ordered[quantile_index - 1] if quantile_index <= m else math.inf
    return CalibrationResult(
        gamma=gamma,
        delta=delta,
        m=m,
        quantile_index=quantile_index,
        terminal_scores=tuple(ordered),
    )


def empirical_fpr(nominal_terminal_scores: Sequence[float], gamma: float) -> float:
    """Fraction of nominal terminal scores strictly above gamma."""
    scores = np.asarray(list(nominal_terminal_scores), dtype=np.float64)
    if scores.size == 0:
        raise ValueError("need at least one score")
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    return float(np.mean(scores > gamma))


def _ridge(cov: np.ndarray) -> np.ndarray:
    dim = cov.shape[0]
    lam = 1e-6 * float(np.trace(cov)) / dim
    # A zero-trace covariance (identical embeddings) would leave the matrix
    # singular; the absolute floor keeps downstream inverses finite.
    lam = max(lam, 1e-12)
    return cov + lam * np.eye(dim)


def leave_trajectory_out_stats(
        embeddings_by_trajectory: Sequence[Sequence[np.ndarray]],
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-trajectory (mean, ridged covariance) fit on all other trajectories.

    Used to calibrate embedding-based scores without letting a trajectory
    see its own statistics.
    """
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in embeddings_by_trajectory]
    if len(groups) < 2:
        raise ValueError("need at least 2 trajectories")
    dims = {g.shape[1] for g in groups}
    if len(dims) != 1:
        raise ValueError(f"inconsistent embedding dimensions: {sorted(dims)}")
    results = []
    for i in range(len(groups)):
        rest = np.vstack([g for j, g in enumerate(groups) if j != i])
        mu = rest.mean(axis=0)
        if rest.shape[0] > 1:
            cov = np.atleast_2d(np.cov(rest, rowvar=False, ddof=1))
        else:
            cov = np.zeros((rest.shape[1], rest.shape[1]))
        results.append((mu, _ridge(cov)))
    return results


def pooled_stats(embeddings_by_trajectory: Sequence[Sequence[np.ndarray]],
                 ) -> tuple[np.ndarray, np.ndarray]:
    """(mean, ridged covariance) over every embedding from every trajectory."""
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in embeddings_by_trajectory]
    if not groups:
        raise ValueError("need at least one trajectory")
    allpts = np.vstack(groups)
    mu = allpts.mean(axis=0)
    if allpts.shape[0] > 1:
        cov = np.atleast_2d(np.cov(allpts, rowvar=False, ddof=1))
    else:
        cov = np.zeros((allpts.shape[1], allpts.shape[1]))
    return mu, _ridge(cov)
