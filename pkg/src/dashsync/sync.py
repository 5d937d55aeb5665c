"""Event timestamping and alignment of 100 Hz telemetry to 3 fps frames.

Blocks are defined by sample index, not timestamp: block ``k`` covers samples
``(k-1)*W .. k*W - 1`` counted from sample ``round(t_start * f_s)`` of the
trace, with ``W = floor(f_s / fps)``. At the defaults that uses 594 of the 600
samples in a 6 s window; the trailing 6 are dropped. Frame ``k`` is stamped at
its block's start time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from dashsync.telemetry import ClipManifest, GpsTrace, ImuTrace, TooFewSamples

WINDOW_BEFORE_S = 4.0
WINDOW_AFTER_S = 2.0
WINDOW_S = WINDOW_BEFORE_S + WINDOW_AFTER_S


class SyncError(ValueError):
    pass


class EmptySeries(SyncError):
    pass


class ClipTooShort(SyncError):
    pass


class WindowTooShort(SyncError):
    def __init__(self, actual: int, required: int):
        super().__init__(f"window has {actual} samples, need at least {required}")
        self.actual = actual
        self.required = required


@dataclass(frozen=True)
class SyncConfig:
    sensor_rate_hz: float = 100.0
    target_fps: float = 3.0
    n_frames: int = 18

    @property
    def block_size(self) -> int:
        return int(math.floor(self.sensor_rate_hz / self.target_fps))

    @property
    def required_samples(self) -> int:
        return self.n_frames * self.block_size


DEFAULT_CONFIG = SyncConfig()


@dataclass(frozen=True)
class EventWindow:
    t_e: float
    t_start: float
    t_end: float
    n_frames: int = 18
    target_fps: float = 3.0

    @property
    def frame_times(self) -> list[float]:
        return [self.t_start + k / self.target_fps for k in range(self.n_frames)]


@dataclass(frozen=True)
class SyncedFrame:
    """One of the 18 aligned frames.

    ``accel``, ``delta_angle`` and ``speed`` are ``None`` for clips recorded
    without telemetry.
    """

    k: int
    t_k: float
    raw_frame_index: int
    accel: tuple[float, float, float] | None
    delta_angle: float | None
    speed: float | None

    @property
    def has_telemetry(self) -> bool:
        return self.accel is not None

    def to_record(self, t_e: float) -> dict:
        return {
            "k": self.k,
            "t_k": self.t_k,
            "t_e": t_e,
            "raw_frame_index": self.raw_frame_index,
            "ax": None if self.accel is None else self.accel[0],
            "ay": None if self.accel is None else self.accel[1],
            "az": None if self.accel is None else self.accel[2],
            "delta_angle": self.delta_angle,
            "speed": self.speed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SyncedFrame":
        accel = None
        if rec.get("ax") is not None:
            accel = (float(rec["ax"]), float(rec["ay"]), float(rec["az"]))
        return cls(
            k=int(rec["k"]),
            t_k=float(rec["t_k"]),
            raw_frame_index=int(rec["raw_frame_index"]),
            accel=accel,
            delta_angle=None if rec.get("delta_angle") is None else float(rec["delta_angle"]),
            speed=None if rec.get("speed") is None else float(rec["speed"]),
        )


@dataclass(frozen=True)
class SyncedSequence:
    window: EventWindow
    frames: tuple[SyncedFrame, ...]

    @property
    def t_e(self) -> float:
        return self.window.t_e


def peak_abs_index(series) -> int:
    """Index of the largest ``|x|``; earliest index wins ties."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size == 0:
        raise EmptySeries("cannot locate a peak in an empty series")
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(np.abs(arr)))


def detect_event_timestamp(accel_x, *, sample_rate_hz: float = 100.0, start_time_s: float = 0.0) -> float:
    """Time of the sample with the largest absolute longitudinal acceleration."""
    return start_time_s + peak_abs_index(accel_x) / sample_rate_hz


def clamp_event_window(t_e: float, clip_duration: float, cfg: SyncConfig = DEFAULT_CONFIG) -> EventWindow:
    """Place the [t_e - 4, t_e + 2] window, sliding it to stay inside the clip."""
    if clip_duration < WINDOW_S:
        raise ClipTooShort(f"clip is {clip_duration:g} s, need at least {WINDOW_S:g} s")
    t_start = t_e - WINDOW_BEFORE_S
    t_start = min(max(t_start, 0.0), clip_duration - WINDOW_S)
    return EventWindow(
        t_e=t_e,
        t_start=t_start,
        t_end=t_start + WINDOW_S,
        n_frames=cfg.n_frames,
        target_fps=cfg.target_fps,
    )


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def select_frame_indices(window: EventWindow, raw_fps: float, total_frames: int | None = None) -> list[int]:
    if raw_fps <= 0:
        raise ValueError("raw_fps must be positive")
    indices = [_round_half_up(t * raw_fps) for t in window.frame_times]
    hi = total_frames - 1 if total_frames is not None else None
    out = []
    for idx in indices:
        idx = max(idx, 0)
        if hi is not None:
            idx = min(idx, hi)
        out.append(idx)
    return out


def _blocks(samples: np.ndarray, cfg: SyncConfig) -> np.ndarray:
    w = cfg.block_size
    need = cfg.required_samples
    if samples.shape[0] < need:
        raise WindowTooShort(samples.shape[0], need)
    return samples[:need].reshape((cfg.n_frames, w) + samples.shape[1:])


def block_average_accel(window_samples, cfg: SyncConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Per-frame mean of W consecutive samples; returns shape ``(18, 3)``.

    Accepts ``(N,)`` or ``(N, axes)`` input; the output keeps the trailing axes.
    """
    samples = np.asarray(window_samples, dtype=np.float64)
    return _blocks(samples, cfg).sum(axis=1) / cfg.block_size


def integrate_gyro_z(window_omega_z, cfg: SyncConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Rectangular integral of yaw rate over each block, in degrees."""
    samples = np.asarray(window_omega_z, dtype=np.float64)
    if samples.ndim != 1:
        raise ValueError("omega_z must be one-dimensional")
    return _blocks(samples, cfg).sum(axis=1) / cfg.sensor_rate_hz


def interpolate_speed(gps: GpsTrace, frame_times) -> np.ndarray:
    """Piecewise-linear speed; queries outside the trace hold the end values."""
    if len(gps) < 2:
        raise TooFewSamples("GPS interpolation needs at least 2 samples")
    return np.interp(np.asarray(frame_times, dtype=np.float64), gps.times, gps.speed)


def window_sample_offset(imu: ImuTrace, t_start: float) -> int:
    """Index of the sample that opens the window: ``round(t_start * f_s)``."""
    return max(0, _round_half_up((t_start - imu.start_time_s) * imu.sample_rate_hz))


def build_synced_sequence(
    imu: ImuTrace | None,
    gps: GpsTrace | None,
    manifest: ClipManifest,
    cfg: SyncConfig = DEFAULT_CONFIG,
) -> SyncedSequence:
    """Compose event detection, windowing, frame selection and alignment.

    Without an IMU trace there is no event to detect; the window is centred
    in the clip and the frames carry no telemetry.
    """
    if imu is None:
        t_e = manifest.duration_s / 2 + (WINDOW_BEFORE_S - WINDOW_AFTER_S) / 2
    else:
        t_e = detect_event_timestamp(
            imu.accel_x, sample_rate_hz=imu.sample_rate_hz, start_time_s=imu.start_time_s
        )
    window = clamp_event_window(t_e, manifest.duration_s, cfg)
    indices = select_frame_indices(window, manifest.fps, manifest.total_frames)
    times = window.frame_times

    if imu is None:
        frames = tuple(
            SyncedFrame(k + 1, times[k], indices[k], None, None, None) for k in range(cfg.n_frames)
        )
        return SyncedSequence(window, frames)

    start = window_sample_offset(imu, window.t_start)
    stop = start + cfg.required_samples
    accel = block_average_accel(imu.accel[start:stop], cfg)
    dalpha = integrate_gyro_z(imu.gyro_z[start:stop], cfg)
    if gps is not None:
        speed = interpolate_speed(gps, times)
    else:
        speed = [None] * cfg.n_frames

    frames = tuple(
        SyncedFrame(
            k=k + 1,
            t_k=times[k],
            raw_frame_index=indices[k],
            accel=(float(accel[k, 0]), float(accel[k, 1]), float(accel[k, 2])),
            delta_angle=float(dalpha[k]),
            speed=None if speed[k] is None else float(speed[k]),
        )
        for k in range(cfg.n_frames)
    )
    return SyncedSequence(window, frames)


def format_sync_table(seq: SyncedSequence) -> str:
    """Plain-text table of the 18 aligned rows, for debugging."""

    def fmt(v: float | None) -> str:
        if v is None:
            return f"{'-':>9}"
        text = f"{v:9.3f}"
        return text.replace("-0.000", " 0.000") if text.strip() == "-0.000" else text

    lines = [
        f"t_e={seq.t_e:.2f}s window=[{seq.window.t_start:.2f}, {seq.window.t_end:.2f}]",
        f"{'k':>2} {'t_k':>7} {'frame':>6} {'ax':>9} {'ay':>9} {'az':>9} {'dA':>9} {'v':>9}",
    ]
    for f in seq.frames:
        ax, ay, az = f.accel if f.accel is not None else (None, None, None)
        lines.append(
            f"{f.k:>2} {f.t_k:7.3f} {f.raw_frame_index:>6} {fmt(ax)} {fmt(ay)} {fmt(az)} "
            f"{fmt(f.delta_angle)} {fmt(f.speed)}"
        )
    return "\n".join(lines) + "\n"
