"""Rollout data model and the `.sentinel.jsonl` on-disk log format.

A rollout log captures what an action-chunk policy did during one episode:
a header describing the policy/task geometry, one record per inference step
holding the sampled chunk batch, and an optional terminal label derived from
the episode return.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

FORMAT_VERSION = 1
LOG_SUFFIX = ".sentinel.jsonl"

_HEADER_KEYS = {
    "format_version",
    "action_dim",
    "prediction_horizon",
    "execution_horizon",
    "episode_limit",
    "step_duration",
    "action_mask",
    "task_description",
    "task_time_limit",
}
_RECORD_KEYS = {"timestep", "chunk_samples", "executed_index", "embedding", "frame_ref"}
_LABEL_KEYS = {"label", "return_value", "return_threshold"}


class InvalidLogError(ValueError):
    """A log value violates a structural invariant."""


class LogParseError(ValueError):
    """A log file line could not be parsed or validated."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidLogError(message)


@dataclass
class RolloutHeader:
    """Episode-level geometry shared by every record in a log.

    Fields mirror the on-disk header line: ``action_dim`` is the per-action
    dimension, ``prediction_horizon`` (h) and ``execution_horizon`` (k) the
    chunk lengths, ``episode_limit`` (H) the environment-step budget, and
    ``action_mask`` selects the dimensions used in distance computations
    (binary gripper-style dimensions are typically excluded).
    """

    action_dim: int
    prediction_horizon: int
    execution_horizon: int
    episode_limit: int
    step_duration: float
    action_mask: tuple[bool, ...]
    task_description: str
    task_time_limit: float
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        self.action_mask = tuple(bool(b) for b in self.action_mask)
        _check(self.format_version == FORMAT_VERSION,
               f"unsupported format_version {self.format_version}")
        for name in ("action_dim", "prediction_horizon", "execution_horizon", "episode_limit"):
            value = getattr(self, name)
            _check(isinstance(value, (int, np.integer)) and not isinstance(value, bool),
                   f"{name} must be an integer, got {value!r}")
            setattr(self, name, int(value))
        _check(self.action_dim >= 1, "action_dim must be >= 1")
        _check(0 < self.execution_horizon, "execution_horizon must be > 0")
        _check(self.execution_horizon < self.prediction_horizon,
               "execution_horizon must be < prediction_horizon")
        _check(self.prediction_horizon <= self.episode_limit,
               "prediction_horizon must be <= episode_limit")
        self.step_duration = float(self.step_duration)
        _check(self.step_duration > 0, "step_duration must be > 0")
        self.task_time_limit = float(self.task_time_limit)
        _check(self.task_time_limit > 0, "task_time_limit must be > 0")
        _check(len(self.action_mask) == self.action_dim,
               "action_mask length must equal action_dim")
        _check(any(self.action_mask), "action_mask needs at least one true entry")
        _check(isinstance(self.task_description, str), "task_description must be a string")

    @property
    def masked_dim(self) -> int:
        return sum(self.action_mask)

    def to_json_obj(self) -> dict:
        return {
            "format_version": self.format_version,
            "action_dim": self.action_dim,
            "prediction_horizon": self.prediction_horizon,
            "execution_horizon": self.execution_horizon,
            "episode_limit": self.episode_limit,
            "step_duration": self.step_duration,
            "action_mask": list(self.action_mask),
            "task_description": self.task_description,
            "task_time_limit": self.task_time_limit,
        }

    def __eq__(self, other):
        if not isinstance(other, RolloutHeader):
            return NotImplemented
        return self.to_json_obj() == other.to_json_obj()


@dataclass(eq=False)
class InferenceRecord:
    """One policy inference step: a batch of sampled chunks plus bookkeeping.

    ``chunk_samples`` has shape (B, h, action_dim); ``executed_index`` names
    the row that was actually executed, so the executed action prefix is
    recoverable without storing it twice.
    """

    timestep: int
    chunk_samples: np.ndarray
    executed_index: int = 0
    embedding: Optional[np.ndarray] = None
    frame_ref: Optional[str] = None

    def __post_init__(self):
        _check(isinstance(self.timestep, (int, np.integer)) and not isinstance(self.timestep, bool),
               "timestep must be an integer")
        self.timestep = int(self.timestep)
        _check(self.timestep >= 0, "timestep must be >= 0")
        chunks = np.asarray(self.chunk_samples, dtype=np.float64)
        _check(chunks.ndim == 3, f"chunk_samples must be B x h x action_dim, got shape {chunks.shape}")
        _check(chunks.shape[0] >= 1, "need at least one sampled chunk")
        _check(bool(np.isfinite(chunks).all()), "chunk_samples must be finite")
        self.chunk_samples = chunks
        _check(isinstance(self.executed_index, (int, np.integer)), "executed_index must be an integer")
        self.executed_index = int(self.executed_index)
        _check(0 <= self.executed_index < chunks.shape[0],
               "executed_index out of range")
        if self.embedding is not None:
            emb = np.asarray(self.embedding, dtype=np.float64)
            _check(emb.ndim == 1, "embedding must be a flat vector")
            _check(bool(np.isfinite(emb).all()), "embedding must be finite")
            self.embedding = emb
        if self.frame_ref is not None:
            _check(isinstance(self.frame_ref, str), "frame_ref must be a string")

    @property
    def batch_size(self) -> int:
        return self.chunk_samples.shape[0]

    def executed_chunk(self) -> np.ndarray:
        return self.chunk_samples[self.executed_index]

    def to_json_obj(self) -> dict:
        obj = {
            "timestep": self.timestep,
            "chunk_samples": self.chunk_samples.tolist(),
            "executed_index": self.executed_index,
        }
        if self.embedding is not None:
            obj["embedding"] = self.embedding.tolist()
        if self.frame_ref is not None:
            obj["frame_ref"] = self.frame_ref
        return obj

    def __eq__(self, other):
        if not isinstance(other, InferenceRecord):
            return NotImplemented
        if self.timestep != other.timestep or self.executed_index != other.executed_index:
            return False
        if not np.array_equal(self.chunk_samples, other.chunk_samples):
            return False
        if (self.embedding is None) != (other.embedding is None):
            return False
        if self.embedding is not None and not np.array_equal(self.embedding, other.embedding):
            return False
        return self.frame_ref == other.frame_ref


@dataclass(frozen=True)
class RolloutLabel:
    """Terminal outcome: failure iff the return fell below the threshold."""

    outcome: str
    return_value: float
    return_threshold: float

    def __post_init__(self):
        _check(self.outcome in ("success", "failure"),
               f"label must be 'success' or 'failure', got {self.outcome!r}")
        object.__setattr__(self, "return_value", float(self.return_value))
        object.__setattr__(self, "return_threshold", float(self.return_threshold))
        _check(np.isfinite(self.return_value) and np.isfinite(self.return_threshold),
               "label return values must be finite")
        expected = "failure" if self.return_value < self.return_threshold else "success"
        _check(self.outcome == expected,
               f"label {self.outcome!r} inconsistent with return {self.return_value} "
               f"vs threshold {self.return_threshold}")

    @property
    def is_failure(self) -> bool:
        return self.outcome == "failure"

    def to_json_obj(self) -> dict:
        return {
            "label": self.outcome,
            "return_value": self.return_value,
            "return_threshold": self.return_threshold,
        }


@dataclass(eq=False)
class RolloutLog:
    """A validated episode log: header, ordered inference records, optional label.

    Logs are immutable by convention after construction; share them freely
    across parallel scorers.
    """

    header: RolloutHeader
    records: list[InferenceRecord]
    label: Optional[RolloutLabel] = None

    def __post_init__(self):
        _check(len(self.records) >= 1, "log needs at least one record")
        h = self.header.prediction_horizon
        k = self.header.execution_horizon
        d = self.header.action_dim
        previous_t = None
        for record in self.records:
            _check(record.chunk_samples.shape[1] == h,
                   f"record at t={record.timestep}: chunk horizon "
                   f"{record.chunk_samples.shape[1]} != prediction_horizon {h}")
            _check(record.chunk_samples.shape[2] == d,
                   f"record at t={record.timestep}: action dim "
                   f"{record.chunk_samples.shape[2]} != action_dim {d}")
            _check(record.timestep % k == 0,
                   f"timestep {record.timestep} not a multiple of execution_horizon {k}")
            if record.embedding is not None and self.records[0].embedding is not None:
                _check(record.embedding.shape == self.records[0].embedding.shape,
                       "embedding dimensions differ between records")
            if previous_t is not None:
                _check(record.timestep == previous_t + k,
                       f"timesteps must increase by exactly {k}: "
                       f"{previous_t} -> {record.timestep}")
            previous_t = record.timestep
        _check(self.records[-1].timestep <= self.header.episode_limit - 1,
               "last timestep exceeds episode_limit - 1")

    @property
    def n_records(self) -> int:
        return len(self.records)

    def timesteps(self) -> list[int]:
        return [r.timestep for r in self.records]


def apply_mask(record: InferenceRecord, mask: Sequence[bool]) -> np.ndarray:
    """Restrict a record's chunk batch to the masked action dimensions.

    Returns a (B, h, d') array where d' counts the true mask entries; the
    retained dimensions keep their original order.
    """
    mask = np.asarray([bool(b) for b in mask], dtype=bool)
    if mask.shape[0] != record.chunk_samples.shape[2]:
        raise InvalidLogError(
            f"mask length {mask.shape[0]} != action_dim {record.chunk_samples.shape[2]}")
    if not mask.any():
        raise InvalidLogError("mask selects no dimensions")
    return record.chunk_samples[:, :, mask]


def _json_line(obj: dict) -> str:
    # allow_nan=False rejects NaN/Inf at serialization time; repr-based float
    # formatting gives shortest round-trip decimals.
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def write_log(log: RolloutLog, destination) -> None:
    """Write a validated log as newline-delimited JSON.

    Line 1 is the header, lines 2..n+1 the inference records, and the label
    (when present) is the final line.
    """
    if not isinstance(log, RolloutLog):
        raise InvalidLogError("write_log expects a RolloutLog")
    # Revalidate: dataclasses are mutable, so a log edited after construction
    # could have drifted from its invariants.
    RolloutLog(header=log.header, records=log.records, label=log.label)
    lines = [_json_line(log.header.to_json_obj())]
    lines.extend(_json_line(r.to_json_obj()) for r in log.records)
    if log.label is not None:
        lines.append(_json_line(log.label.to_json_obj()))
    with open(destination, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _reject_constant(token: str):
    raise ValueError(f"non-finite JSON token {token!r} not allowed")


def _load_line(text: str, line_no: int) -> dict:
    try:
        obj = json.loads(text, parse_constant=_reject_constant)
    except ValueError as exc:
        raise LogParseError(str(exc), line_no) from exc
    if not isinstance(obj, dict):
        raise LogParseError("expected a JSON object", line_no)
    return obj


def read_log(source) -> RolloutLog:
    """Parse and validate a `.sentinel.jsonl` file.

    Raises LogParseError with a 1-based line number on malformed input and
    InvalidLogError on structural violations spanning lines.
    """
    with open(source, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().split("\n")
    while raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise LogParseError("empty file", 1)

    header_obj = _load_line(raw_lines[0], 1)
    unknown = set(header_obj) - _HEADER_KEYS
    if unknown:
        raise LogParseError(f"unknown header fields {sorted(unknown)}", 1)
    missing = _HEADER_KEYS - set(header_obj)
    if missing:
        raise LogParseError(f"missing header fields {sorted(missing)}", 1)
    if header_obj["format_version"] != FORMAT_VERSION:
        raise LogParseError(
            f"unsupported format_version {header_obj['format_version']!r} "
            f"(supported: {FORMAT_VERSION})", 1)
    try:
        header = RolloutHeader(**header_obj)
    except InvalidLogError as exc:
        raise LogParseError(str(exc), 1) from exc

    records: list[InferenceRecord] = []
    label: Optional[RolloutLabel] = None
    for idx, text in enumerate(raw_lines[1:], start=2):
        obj = _load_line(text, idx)
        if "label" in obj:
            if label is not None:
                raise LogParseError("multiple label lines", idx)
            unknown = set(obj) - _LABEL_KEYS
            if unknown:
                raise LogParseError(f"unknown label fields {sorted(unknown)}", idx)
            missing = _LABEL_KEYS - set(obj)
            if missing:
                raise LogParseError(f"missing label fields {sorted(missing)}", idx)
            try:
                label = RolloutLabel(obj["label"], obj["return_value"], obj["return_threshold"])
            except InvalidLogError as exc:
                raise LogParseError(str(exc), idx) from exc
        elif "timestep" in obj:
            if label is not None:
                raise LogParseError("record after label line", idx)
            unknown = set(obj) - _RECORD_KEYS
            if unknown:
                raise LogParseError(f"unknown record fields {sorted(unknown)}", idx)
            try:
                records.append(InferenceRecord(
                    timestep=obj["timestep"],
                    chunk_samples=obj["chunk_samples"],
                    executed_index=obj.get("executed_index", 0),
                    embedding=obj.get("embedding"),
                    frame_ref=obj.get("frame_ref"),
                ))
            except (InvalidLogError, TypeError) as exc:
                raise LogParseError(str(exc), idx) from exc
        else:
            raise LogParseError("line is neither a record nor a label", idx)

    if not records:
        raise LogParseError("log contains no inference records", 1)
    try:
        return RolloutLog(header=header, records=records, label=label)
    except InvalidLogError as exc:
        raise LogParseError(str(exc), 1) from exc
