from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from dashsync.semantic import Detection, SemanticMetadata, summarize_metadata
from dashsync.sync import SyncedFrame


def make_frames(t_start: float = 4.0, accel=(0.0, 0.0, 9.81), dalpha: float = 0.0, speed: float = 10.0,
                telemetry: bool = True) -> list[SyncedFrame]:
    frames = []
    for k in range(1, 19):
        t = t_start + (k - 1) / 3
        frames.append(SyncedFrame(
            k=k,
            t_k=t,
            raw_frame_index=round(t * 30),
            accel=tuple(accel) if telemetry else None,
            delta_angle=dalpha if telemetry else None,
            speed=speed if telemetry else None,
        ))
    return frames


def tree_digest(root: Path) -> str:
    """SHA-256 over every file's relative path and bytes, in sorted order."""
    h = hashlib.sha256()
    for path in sorted(p for p in Path(root).rglob("*") if p.is_file()):
        h.update(path.relative_to(root).as_posix().encode() + b"\0")
        h.update(path.read_bytes() + b"\0")
    return h.hexdigest()


@pytest.fixture
def frames():
    return make_frames()


@pytest.fixture
def meta():
    return SemanticMetadata(
        crash_detected=True,
        maneuver="HardBrake",
        stop_sign_severity=0.7,
        detections=(
            Detection(3, "car", 0.2, 0.3, 0.4, 0.5, 1),
            Detection(3, "car", 0.6, 0.6, 0.8, 0.9, 2),
            Detection(3, "pedestrian", 0.1, 0.1, 0.2, 0.3, 7),
            Detection(5, "car", 0.2, 0.3, 0.4, 0.5, 1),
        ),
    )


@pytest.fixture
def summary(meta, frames):
    return summarize_metadata(meta, frames)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
