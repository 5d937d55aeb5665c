"""Expert-model outputs (crash flag, maneuver, violations, detections).

The expert models themselves run elsewhere; this module owns their file
contract, a threshold classifier used as a stand-in for the crash detector,
and the per-frame text summaries fed to the teacher prompt.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from dashsync.records import RecordError, read_records, write_records
from dashsync.sync import EmptySeries, SyncedFrame, peak_abs_index
from dashsync.telemetry import ImuTrace, MissingFile, SceClass


class SemanticError(ValueError):
    pass


class MalformedRecord(SemanticError):
    pass


class OutOfRangeBBox(SemanticError):
    pass


class OutOfRangeSeverity(SemanticError):
    pass


class Maneuver(str, Enum):
    HARD_BRAKE = "HardBrake"
    HARD_TURN = "HardTurn"
    HARD_ACCELERATION = "HardAcceleration"
    SWERVE = "Swerve"
    NONE = "None"


@dataclass(frozen=True)
class Detection:
    k: int
    label: str
    x1: float
    y1: float
    x2: float
    y2: float
    track_id: int | None = None

    def __post_init__(self) -> None:
        if not self.label:
            raise MalformedRecord("detection class label must be non-empty")
        if not (1 <= self.k <= 18):
            raise OutOfRangeBBox(f"frame ordinal {self.k} outside 1..18")
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(isinstance(c, (int, float)) and math.isfinite(c) for c in coords):
            raise OutOfRangeBBox(f"non-finite bbox {coords}")
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise OutOfRangeBBox(f"bbox {coords} is not a normalized box")

    @property
    def centroid(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    def sort_key(self) -> tuple:
        return (self.label, self.track_id is None, self.track_id or 0, self.x1, self.y1, self.x2, self.y2)

    def to_row(self) -> list:
        return [self.k, self.label, self.x1, self.y1, self.x2, self.y2, self.track_id]


@dataclass(frozen=True)
class SemanticMetadata:
    """Aggregate output of the expert models for one clip.

    ``maneuver`` holds a :class:`Maneuver` value when it is one of the known
    categories and the raw string otherwise; ``None`` and ``"None"`` both mean
    no harsh maneuver.
    """

    crash_detected: bool = False
    maneuver: str | None = None
    traffic_light_violation: bool = False
    stop_sign_severity: float | None = None
    detections: tuple[Detection, ...] = field(default_factory=tuple)
    clip_id: str | None = None

    def __post_init__(self) -> None:
        sev = self.stop_sign_severity
        if sev is not None and not (isinstance(sev, (int, float)) and 0.0 <= sev <= 1.0):
            raise OutOfRangeSeverity(f"stop_sign_severity {sev!r} outside [0, 1]")
        object.__setattr__(self, "detections", tuple(self.detections))

    @property
    def has_maneuver(self) -> bool:
        return self.maneuver not in (None, Maneuver.NONE.value)

    @property
    def has_flags(self) -> bool:
        return (
            self.crash_detected
            or self.has_maneuver
            or self.traffic_light_violation
            or self.stop_sign_severity is not None
        )

    def to_record(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "crash_detected": self.crash_detected,
            "maneuver": self.maneuver,
            "traffic_light_violation": self.traffic_light_violation,
            "stop_sign_severity": self.stop_sign_severity,
            "detections": [d.to_row() for d in self.detections],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SemanticMetadata":
        if not isinstance(rec, dict):
            raise MalformedRecord("semantic record must be a key-value object")
        for key in ("crash_detected", "traffic_light_violation"):
            if not isinstance(rec.get(key, False), bool):
                raise MalformedRecord(f"{key} must be a boolean")
        maneuver = rec.get("maneuver")
        if maneuver is not None and not isinstance(maneuver, str):
            raise MalformedRecord("maneuver must be a string")
        sev = rec.get("stop_sign_severity")
        if sev is not None and (isinstance(sev, bool) or not isinstance(sev, (int, float))):
            raise MalformedRecord("stop_sign_severity must be a number")
        rows = rec.get("detections", [])
        if not isinstance(rows, list):
            raise MalformedRecord("detections must be an array")
        dets = []
        for row in rows:
            if not isinstance(row, list) or len(row) != 7:
                raise MalformedRecord(f"detection must be [k, class, x1, y1, x2, y2, track_id]: {row!r}")
            k, label, x1, y1, x2, y2, track = row
            if isinstance(k, bool) or not isinstance(k, int) or not isinstance(label, str):
                raise MalformedRecord(f"bad detection frame/class: {row!r}")
            if any(isinstance(c, bool) or not isinstance(c, (int, float)) for c in (x1, y1, x2, y2)):
                raise MalformedRecord(f"bad detection coordinates: {row!r}")
            if track is not None and (isinstance(track, bool) or not isinstance(track, int)):
                raise MalformedRecord(f"bad track_id: {row!r}")
            dets.append(Detection(k, label, float(x1), float(y1), float(x2), float(y2), track))
        return cls(
            crash_detected=rec.get("crash_detected", False),
            maneuver=maneuver,
            traffic_light_violation=rec.get("traffic_light_violation", False),
            stop_sign_severity=None if sev is None else float(sev),
            detections=tuple(dets),
            clip_id=rec.get("clip_id"),
        )


def load_semantic_metadata(path: str | Path) -> SemanticMetadata:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such semantic metadata file: {path}")
    try:
        records = read_records(path)
    except RecordError as exc:
        raise MalformedRecord(str(exc)) from None
    if len(records) != 1:
        raise MalformedRecord(f"{path}: expected exactly one record, found {len(records)}")
    return SemanticMetadata.from_record(records[0])


def write_semantic_metadata(meta: SemanticMetadata, path: str | Path) -> None:
    write_records(path, [meta.to_record()])


@dataclass(frozen=True)
class SceThresholds:
    collision: float = 10.0
    near_collision: float = 4.0

    def __post_init__(self) -> None:
        if not (0 <= self.near_collision <= self.collision):
            raise ValueError("need 0 <= near_collision threshold <= collision threshold")

    def classify(self, peak: float) -> SceClass:
        if peak >= self.collision:
            return SceClass.COLLISION
        if peak >= self.near_collision:
            return SceClass.NEAR_COLLISION
        return SceClass.NORMAL


DEFAULT_THRESHOLDS = SceThresholds()


def heuristic_sce_classifier(window: ImuTrace | Sequence[float] | np.ndarray,
                             thresholds: SceThresholds = DEFAULT_THRESHOLDS) -> SceClass:
    """Classify by peak absolute longitudinal acceleration (m/s^2)."""
    accel_x = window.accel_x if isinstance(window, ImuTrace) else np.asarray(window, dtype=np.float64)
    if accel_x.size == 0:
        raise EmptySeries("cannot classify an empty window")
    peak = abs(float(accel_x[peak_abs_index(accel_x)]))
    return thresholds.classify(peak)


def _header_line(meta: SemanticMetadata) -> str:
    if not meta.has_flags:
        return "expert flags: no expert flags"
    parts = []
    if meta.crash_detected:
        parts.append("crash detected")
    if meta.has_maneuver:
        parts.append(f"harsh maneuver {meta.maneuver}")
    if meta.traffic_light_violation:
        parts.append("traffic light violation")
    if meta.stop_sign_severity is not None:
        parts.append(f"stop sign severity {meta.stop_sign_severity:.2f}")
    return "expert flags: " + "; ".join(parts)


def _frame_line(k: int, dets: Iterable[Detection]) -> str:
    dets = sorted(dets, key=Detection.sort_key)
    if not dets:
        return f"frame {k}: no detections"
    counts = Counter(d.label for d in dets)
    count_text = ", ".join(f"{label}×{counts[label]}" for label in sorted(counts))
    boxes = []
    for d in dets:
        cx, cy = d.centroid
        tag = d.label if d.track_id is None else f"{d.label}#{d.track_id}"
        boxes.append(f"{tag} ({cx:.2f},{cy:.2f})")
    return f"frame {k}: {count_text} | " + ", ".join(boxes)


@dataclass(frozen=True)
class MetadataSummary:
    header: str
    frame_lines: tuple[str, ...]


def summarize_metadata(meta: SemanticMetadata, frames: Sequence[SyncedFrame]) -> MetadataSummary:
    """Header of global flags plus one line of object counts and centroids per frame."""
    by_frame: dict[int, list[Detection]] = {}
    for det in meta.detections:
        by_frame.setdefault(det.k, []).append(det)
    lines = tuple(_frame_line(f.k, by_frame.get(f.k, ())) for f in frames)
    return MetadataSummary(_header_line(meta), lines)
