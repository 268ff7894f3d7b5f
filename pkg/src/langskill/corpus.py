"""Trajectory data model and newline-delimited JSON serialization.

A trajectory is a goal string plus aligned observation/action sequences.
Segmentations attach short annotated spans on top; enriched trajectories
carry the per-step boundary flags and annotations derived from a
segmentation. Latent assignments hold per-step skill ids and switch flags
produced by inference. All values are immutable after construction and
safe to share across threads.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class CorpusFormatError(ValueError):
    """Raised when a corpus file record is malformed."""


@dataclass(frozen=True)
class LengthPolicy:
    """Allowed segment lengths, inclusive on both ends."""

    min_len: int = 1
    max_len: int = 5

    def __post_init__(self):
        if not (1 <= self.min_len <= self.max_len):
            raise ValueError(f"invalid length policy [{self.min_len},{self.max_len}]")


@dataclass(frozen=True)
class Segment:
    """A contiguous span of steps, 0-based, end inclusive."""

    start: int
    end: int
    annotation: str

    def __len__(self) -> int:
        return self.end - self.start + 1


@dataclass
class Trajectory:
    """One demonstration: goal text, observations o_1..o_T, actions a_1..a_T.

    observations has shape (T, *obs_shape) with integer entries; actions is
    a length-T int array. o_t is the observation the agent saw before
    taking a_t.
    """

    goal_text: str
    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.ndim != 1 or len(self.actions) < 1:
            raise ValueError("trajectory needs at least one action")
        if self.observations.shape[0] != self.actions.shape[0]:
            raise ValueError(
                f"observation count {self.observations.shape[0]} != "
                f"action count {self.actions.shape[0]}"
            )

    @property
    def length(self) -> int:
        return int(self.actions.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.goal_text == other.goal_text
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.actions, other.actions)
        )


@dataclass
class Segmentation:
    """Ordered annotated segments meant to tile a trajectory exactly."""

    segments: list[Segment]

    def boundaries(self) -> list[int]:
        """Start indices of each segment."""
        return [s.start for s in self.segments]


@dataclass
class EnrichedTrajectory:
    """Trajectory plus per-step boundary flags and segment annotations.

    beta_bar[t] is 1 iff step t opens a segment (beta_bar[0] is always 1);
    annotations[t] is the segment's annotation, constant within a segment.
    provenance records which segmenter produced the flags and does not
    participate in equality or serialization.
    """

    base: Trajectory
    beta_bar: np.ndarray
    annotations: list[str]
    provenance: str = field(default="", compare=False)

    def __post_init__(self):
        self.beta_bar = np.asarray(self.beta_bar, dtype=np.int64)
        t = self.base.length
        if self.beta_bar.shape != (t,):
            raise ValueError(f"beta_bar shape {self.beta_bar.shape} != ({t},)")
        if len(self.annotations) != t:
            raise ValueError(f"annotation count {len(self.annotations)} != {t}")
        if not set(np.unique(self.beta_bar)) <= {0, 1}:
            raise ValueError("beta_bar entries must be 0 or 1")
        if self.beta_bar[0] != 1:
            raise ValueError("beta_bar[0] must be 1: a trajectory opens a segment")
        for i in range(1, t):
            if self.beta_bar[i] == 0 and self.annotations[i] != self.annotations[i - 1]:
                raise ValueError(f"annotation changes inside a segment at step {i}")

    @property
    def length(self) -> int:
        return self.base.length

    def __eq__(self, other) -> bool:
        if not isinstance(other, EnrichedTrajectory):
            return NotImplemented
        return (
            self.base == other.base
            and np.array_equal(self.beta_bar, other.beta_bar)
            and self.annotations == other.annotations
        )

    def recover_segmentation(self) -> Segmentation:
        """Invert enrich: rebuild the segment list from flags and annotations."""
        starts = [t for t in range(self.length) if self.beta_bar[t] == 1]
        ends = [s - 1 for s in starts[1:]] + [self.length - 1]
        return Segmentation(
            [Segment(s, e, self.annotations[s]) for s, e in zip(starts, ends)]
        )


@dataclass
class LatentAssignment:
    """Per-step switch flags beta_1..beta_T and skill ids k_1..k_T."""

    beta: np.ndarray
    skills: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.int64)
        self.skills = np.asarray(self.skills, dtype=np.int64)
        if self.beta.ndim != 1 or self.beta.shape != self.skills.shape:
            raise ValueError("beta and skills must be 1-d arrays of equal length")
        if len(self.beta) < 1:
            raise ValueError("assignment must cover at least one step")
        if not set(np.unique(self.beta)) <= {0, 1}:
            raise ValueError("beta entries must be 0 or 1")
        if self.beta[0] != 1:
            raise ValueError("beta[0] must be 1: the first step starts a skill")
        for t in range(1, len(self.beta)):
            if self.beta[t] == 0 and self.skills[t] != self.skills[t - 1]:
                raise ValueError(f"skill changes without a switch at step {t}")

    @property
    def length(self) -> int:
        return int(len(self.beta))

    def segments(self) -> list[tuple[int, int, int]]:
        """Decoded (start, end, skill_id) spans."""
        starts = [t for t in range(self.length) if self.beta[t] == 1]
        ends = [s - 1 for s in starts[1:]] + [self.length - 1]
        return [(s, e, int(self.skills[s])) for s, e in zip(starts, ends)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LatentAssignment):
            return NotImplemented
        return np.array_equal(self.beta, other.beta) and np.array_equal(
            self.skills, other.skills
        )


def respects_never_split(beta_bar: np.ndarray, assignment: LatentAssignment) -> bool:
    """True iff the assignment only merges the given segmentation:
    every switch happens at an initial-segment boundary."""
    beta_bar = np.asarray(beta_bar)
    if beta_bar.shape != assignment.beta.shape:
        raise ValueError("beta_bar and assignment lengths differ")
    return bool(np.all((beta_bar == 1) | (assignment.beta == 0)))


def validate_segmentation(
    traj: Trajectory,
    seg: Segmentation,
    policy: LengthPolicy = LengthPolicy(),
    segment_actions: Sequence[Sequence[int]] | None = None,
) -> str | None:
    """Check that seg tiles the trajectory exactly under the length policy.

    Returns None when valid, otherwise a message naming the first
    violation. When segment_actions is given (the per-segment action ids a
    parser extracted), their concatenation must reproduce traj.actions in
    order.
    """
    t = traj.length
    if not seg.segments:
        return "segmentation is empty"
    prev_end = -1
    for i, s in enumerate(seg.segments):
        if s.start != prev_end + 1:
            if s.start <= prev_end:
                return f"segment {i} overlaps or reorders: starts at {s.start} but previous ended at {prev_end}"
            return f"gap before segment {i}: starts at {s.start} but previous ended at {prev_end}"
        if s.end < s.start:
            return f"segment {i} is empty"
        length = len(s)
        if not (policy.min_len <= length <= policy.max_len):
            return (
                f"segment {i} has length {length}, outside "
                f"[{policy.min_len},{policy.max_len}]"
            )
        prev_end = s.end
    if prev_end != t - 1:
        return f"segments cover steps up to {prev_end} but trajectory has {t} steps"
    if segment_actions is not None:
        if len(segment_actions) != len(seg.segments):
            return (
                f"{len(segment_actions)} action groups for "
                f"{len(seg.segments)} segments"
            )
        flat: list[int] = [a for grp in segment_actions for a in grp]
        if len(flat) != t:
            return f"segments list {len(flat)} actions but trajectory has {t}"
        for step, (got, want) in enumerate(zip(flat, traj.actions.tolist())):
            if got != want:
                return f"segment actions disagree with the trajectory at step {step}"
    return None


def enrich(traj: Trajectory, seg: Segmentation) -> EnrichedTrajectory:
    """Attach per-step boundary flags and annotations from a valid segmentation."""
    violation = validate_segmentation(traj, seg, LengthPolicy(1, traj.length))
    if violation is not None:
        raise ValueError(f"invalid segmentation: {violation}")
    t = traj.length
    beta_bar = np.zeros(t, dtype=np.int64)
    annotations = [""] * t
    for s in seg.segments:
        beta_bar[s.start] = 1
        for i in range(s.start, s.end + 1):
            annotations[i] = s.annotation
    return EnrichedTrajectory(base=traj, beta_bar=beta_bar, annotations=annotations)


_TRAJ_FIELDS = {"goal", "observations", "actions"}
_ENRICHED_FIELDS = _TRAJ_FIELDS | {"beta_bar", "annotations"}


def _record_for(item: Trajectory | EnrichedTrajectory) -> dict:
    if isinstance(item, EnrichedTrajectory):
        return {
            "goal": item.base.goal_text,
            "observations": item.base.observations.tolist(),
            "actions": item.base.actions.tolist(),
            "beta_bar": item.beta_bar.tolist(),
            "annotations": list(item.annotations),
        }
    return {
        "goal": item.goal_text,
        "observations": item.observations.tolist(),
        "actions": item.actions.tolist(),
    }


def save_corpus(items: Iterable[Trajectory | EnrichedTrajectory], path: str | Path) -> None:
    """Write one self-describing JSON record per line, UTF-8."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(_record_for(item), separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


def _parse_record(record: dict, line_no: int) -> Trajectory | EnrichedTrajectory:
    keys = set(record)
    if keys == _TRAJ_FIELDS:
        enriched = False
    elif keys == _ENRICHED_FIELDS:
        enriched = True
    else:
        unknown = keys - _ENRICHED_FIELDS
        missing = _TRAJ_FIELDS - keys
        if unknown:
            raise CorpusFormatError(f"line {line_no}: unknown fields {sorted(unknown)}")
        raise CorpusFormatError(f"line {line_no}: missing fields {sorted(missing)}")
    try:
        traj = Trajectory(
            goal_text=record["goal"],
            observations=np.asarray(record["observations"], dtype=np.int64),
            actions=np.asarray(record["actions"], dtype=np.int64),
        )
        if not enriched:
            return traj
        return EnrichedTrajectory(
            base=traj,
            beta_bar=np.asarray(record["beta_bar"], dtype=np.int64),
            annotations=list(record["annotations"]),
        )
    except (ValueError, TypeError) as exc:
        raise CorpusFormatError(f"line {line_no}: {exc}") from exc


def load_corpus(path: str | Path) -> list[Trajectory | EnrichedTrajectory]:
    """Inverse of save_corpus; raises CorpusFormatError naming the bad line."""
    items: list[Trajectory | EnrichedTrajectory] = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(f"line {line_no}: not valid JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusFormatError(f"line {line_no}: record is not an object")
            items.append(_parse_record(record, line_no))
    return items


def corpus_hash(items: Iterable[Trajectory | EnrichedTrajectory]) -> str:
    """Content hash of the serialized corpus, stable across processes."""
    digest = hashlib.sha256()
    for item in items:
        digest.update(json.dumps(_record_for(item), separators=(",", ":"), ensure_ascii=False).encode("utf-8"))
        digest.update(b"\n")
    return digest.hexdigest()
