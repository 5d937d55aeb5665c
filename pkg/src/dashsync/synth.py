"""Synthetic IMU/GPS traces with known events, for tests and demos.

Events are a half-cosine lobe ``A * cos(pi * (t - t_event) / w)`` on the
longitudinal axis for ``|t - t_event| <= w/2``, whose area is ``2 A w / pi``.
Near-collisions add a yaw-rate lobe of the same shape on ``omega_z``. Speed
drops linearly across the spike by the spike's area (the velocity change it
implies), clipped at zero.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from dashsync.semantic import Detection, Maneuver, SemanticMetadata
from dashsync.telemetry import GPS_RATE_HZ, IMU_RATE_HZ, GpsTrace, ImuTrace, SceClass

DEFAULT_AMPLITUDE = {
    SceClass.COLLISION: -11.3,
    SceClass.NEAR_COLLISION: -6.0,
    SceClass.NORMAL: 0.0,
}
GRAVITY_Z = 9.81


class InvalidProfile(ValueError):
    pass


@dataclass(frozen=True)
class SynthProfile:
    kind: SceClass
    event_time_s: float = 8.0
    spike_amplitude: float | None = None
    spike_width_ms: float = 100.0
    base_speed: float = 13.0
    noise_sigma: float = 0.05
    seed: int = 0
    yaw_amplitude_dps: float = 30.0
    yaw_width_ms: float = 1000.0
    gravity_z: float = 0.0

    @property
    def amplitude(self) -> float:
        if self.spike_amplitude is not None:
            return self.spike_amplitude
        return DEFAULT_AMPLITUDE[SceClass(self.kind)]

    def validate(self, duration_s: float) -> None:
        try:
            kind = SceClass(self.kind)
        except ValueError:
            raise InvalidProfile(f"unknown kind {self.kind!r}") from None
        if not kind.trainable:
            raise InvalidProfile("kind must be normal, near-collision or collision")
        if not (duration_s > 0 and math.isfinite(duration_s)):
            raise InvalidProfile("duration must be positive")
        if not (0 <= self.event_time_s <= duration_s):
            raise InvalidProfile(f"event_time_s {self.event_time_s} outside [0, {duration_s}]")
        if not self.spike_width_ms > 0 or not self.yaw_width_ms > 0:
            raise InvalidProfile("spike widths must be positive")
        if not self.noise_sigma >= 0:
            raise InvalidProfile("noise_sigma must be non-negative")
        if not self.base_speed >= 0:
            raise InvalidProfile("base_speed must be non-negative")


@dataclass(frozen=True)
class GroundTruth:
    kind: SceClass
    event_time_s: float
    spike_amplitude: float
    spike_width_ms: float
    spike_area: float
    seed: int

    def to_record(self, clip_id: str | None = None) -> dict:
        rec = asdict(self)
        rec["kind"] = SceClass(self.kind).value
        if clip_id is not None:
            rec["clip_id"] = clip_id
        return rec


def half_cosine(t: np.ndarray, center: float, width_s: float, amplitude: float) -> np.ndarray:
    x = (t - center) / width_s
    out = amplitude * np.cos(np.pi * x)
    out[np.abs(x) > 0.5] = 0.0
    return out


def half_cosine_area(width_s: float, amplitude: float) -> float:
    return 2.0 * amplitude * width_s / math.pi


def synth_trace(profile: SynthProfile, duration_s: float = 16.0) -> tuple[ImuTrace, GpsTrace, GroundTruth]:
    profile.validate(duration_s)
    kind = SceClass(profile.kind)
    rng = np.random.default_rng(profile.seed)
    n = int(round(duration_s * IMU_RATE_HZ))
    t = np.arange(n) / IMU_RATE_HZ
    accel = rng.normal(0.0, profile.noise_sigma, size=(n, 3)) if profile.noise_sigma > 0 else np.zeros((n, 3))
    gyro = rng.normal(0.0, profile.noise_sigma, size=(n, 3)) if profile.noise_sigma > 0 else np.zeros((n, 3))
    accel[:, 2] += profile.gravity_z

    width_s = profile.spike_width_ms / 1000.0
    amp = profile.amplitude if kind is not SceClass.NORMAL else 0.0
    area = 0.0
    if kind is not SceClass.NORMAL:
        accel[:, 0] += half_cosine(t, profile.event_time_s, width_s, amp)
        area = half_cosine_area(width_s, amp)
    if kind is SceClass.NEAR_COLLISION:
        gyro[:, 2] += half_cosine(t, profile.event_time_s, profile.yaw_width_ms / 1000.0,
                                  profile.yaw_amplitude_dps)

    n_gps = max(2, int(math.floor(duration_s * GPS_RATE_HZ + 1e-9)))
    tg = np.arange(n_gps) / GPS_RATE_HZ
    speed = np.full(n_gps, float(profile.base_speed))
    if kind is not SceClass.NORMAL:
        drop = abs(area)
        lo, hi = profile.event_time_s - width_s / 2, profile.event_time_s + width_s / 2
        frac = np.clip((tg - lo) / (hi - lo), 0.0, 1.0)
        speed = np.maximum(profile.base_speed - drop * frac, 0.0)

    truth = GroundTruth(kind, profile.event_time_s, amp, profile.spike_width_ms, area, profile.seed)
    return ImuTrace(accel, gyro), GpsTrace(speed), truth


def synth_semantic(profile: SynthProfile, seed: int | None = None) -> SemanticMetadata:
    """Plausible expert output consistent with the profile's kind."""
    kind = SceClass(profile.kind)
    rng = np.random.default_rng(profile.seed if seed is None else seed)
    dets = []
    n_cars = int(rng.integers(1, 4))
    for track in range(1, n_cars + 1):
        x1 = float(np.round(rng.uniform(0.05, 0.6), 3))
        y1 = float(np.round(rng.uniform(0.3, 0.6), 3))
        w = float(np.round(rng.uniform(0.08, 0.3), 3))
        h = float(np.round(rng.uniform(0.08, 0.3), 3))
        for k in range(1, 19):
            if rng.random() < 0.8:
                dets.append(Detection(k, "car", x1, y1, min(1.0, x1 + w), min(1.0, y1 + h), track))
    if rng.random() < 0.3:
        for k in range(1, 19, 3):
            dets.append(Detection(k, "pedestrian", 0.8, 0.5, 0.85, 0.7, 100))
    return SemanticMetadata(
        crash_detected=kind is SceClass.COLLISION,
        maneuver=Maneuver.HARD_BRAKE.value if kind is SceClass.NEAR_COLLISION else None,
        traffic_light_violation=False,
        stop_sign_severity=None,
        detections=tuple(dets),
    )


def profile_for(kind: SceClass | str, seed: int, duration_s: float = 16.0, **overrides) -> SynthProfile:
    """Default profile of ``kind`` with a seed-derived event time on the sample grid."""
    kind = SceClass(kind)
    rng = np.random.default_rng([seed, 0x5EED])
    event = float(rng.integers(int(1.0 * IMU_RATE_HZ), int((duration_s - 1.0) * IMU_RATE_HZ))) / IMU_RATE_HZ
    profile = SynthProfile(kind=kind, event_time_s=event, seed=seed, gravity_z=GRAVITY_Z)
    return replace(profile, **overrides) if overrides else profile
