"""Raw clip, sensor and label types plus their CSV loaders.

Units are fixed at load time: acceleration in m/s^2, yaw rate in deg/s and
speed in m/s. Gravity is left in the accelerometer channels. The IMU x axis
is taken as the vehicle's longitudinal axis (braking is negative).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from dashsync.records import encode_record, iter_records

STANDARD_GRAVITY = 9.80665
IMU_RATE_HZ = 100.0
GPS_RATE_HZ = 1.0
RATE_TOLERANCE = 0.01

IMU_HEADER = ("t_s", "ax_mps2", "ay_mps2", "az_mps2", "gx_dps", "gy_dps", "gz_dps")
GPS_HEADER = ("t_s", "speed_mps")

# column suffix -> factor into canonical units
_ACCEL_UNITS = {"mps2": 1.0, "g": STANDARD_GRAVITY}
_GYRO_UNITS = {"dps": 1.0}
_SPEED_UNITS = {"mps": 1.0, "kmh": 1.0 / 3.6}


class TelemetryError(ValueError):
    """Base class for telemetry loading and validation failures."""


class MissingFile(TelemetryError, FileNotFoundError):
    pass


class MalformedRow(TelemetryError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class NonFiniteSample(TelemetryError):
    def __init__(self, line: int | None, reason: str = "non-finite sample"):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}")
        self.line = line


class RateMismatch(TelemetryError):
    pass


class TooFewSamples(TelemetryError):
    pass


class InvalidValue(TelemetryError):
    pass


class SceClass(str, Enum):
    """Safety-critical event severity.

    ``UNKNOWN`` only ever comes out of free-text prediction parsing; it is
    never a valid training label.
    """

    NORMAL = "normal"
    NEAR_COLLISION = "near-collision"
    COLLISION = "collision"
    UNKNOWN = "unknown"

    @property
    def trainable(self) -> bool:
        return self is not SceClass.UNKNOWN

    @classmethod
    def from_token(cls, token: str) -> "SceClass":
        """Strict lookup of a canonical trainable token."""
        value = cls(token)
        if not value.trainable:
            raise ValueError(f"{token!r} is not a trainable label")
        return value


TRAINABLE_CLASSES = (SceClass.NORMAL, SceClass.NEAR_COLLISION, SceClass.COLLISION)


class Source(str, Enum):
    PRIVATE = "private"
    BDDX = "bddx"
    NEXAR = "nexar"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ImuTrace:
    """Triaxial accelerometer (m/s^2) and gyroscope (deg/s) at 100 Hz.

    ``accel`` and ``gyro`` are read-only ``(N, 3)`` float64 arrays.
    """

    accel: np.ndarray
    gyro: np.ndarray
    start_time_s: float = 0.0
    sample_rate_hz: float = IMU_RATE_HZ

    def __post_init__(self) -> None:
        accel = _frozen(self.accel)
        gyro = _frozen(self.gyro)
        if accel.ndim != 2 or accel.shape[1] != 3 or gyro.shape != accel.shape:
            raise InvalidValue(
                f"accel/gyro must both be (N, 3); got {accel.shape} and {gyro.shape}"
            )
        if accel.shape[0] < 1:
            raise TooFewSamples("IMU trace needs at least one sample")
        if self.sample_rate_hz != IMU_RATE_HZ:
            raise RateMismatch(f"IMU rate must be {IMU_RATE_HZ:g} Hz, got {self.sample_rate_hz}")
        if not math.isfinite(self.start_time_s):
            raise NonFiniteSample(None, "non-finite start time")
        for name, arr in (("accel", accel), ("gyro", gyro)):
            bad = np.flatnonzero(~np.isfinite(arr).all(axis=1))
            if bad.size:
                raise NonFiniteSample(None, f"non-finite {name} sample at index {bad[0]}")
        object.__setattr__(self, "accel", accel)
        object.__setattr__(self, "gyro", gyro)

    def __len__(self) -> int:
        return self.accel.shape[0]

    @property
    def accel_x(self) -> np.ndarray:
        return self.accel[:, 0]

    @property
    def gyro_z(self) -> np.ndarray:
        return self.gyro[:, 2]

    @property
    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self)) / self.sample_rate_hz

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def section(self, start: int, stop: int) -> "ImuTrace":
        return ImuTrace(
            self.accel[start:stop],
            self.gyro[start:stop],
            start_time_s=self.start_time_s + start / self.sample_rate_hz,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImuTrace):
            return NotImplemented
        return (
            self.start_time_s == other.start_time_s
            and np.array_equal(self.accel, other.accel)
            and np.array_equal(self.gyro, other.gyro)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class GpsTrace:
    """GPS speed (m/s) sampled at 1 Hz."""

    speed: np.ndarray
    start_time_s: float = 0.0
    sample_rate_hz: float = GPS_RATE_HZ

    def __post_init__(self) -> None:
        speed = _frozen(self.speed)
        if speed.ndim != 1:
            raise InvalidValue(f"speed must be 1-D, got shape {speed.shape}")
        if speed.size < 2:
            raise TooFewSamples(f"GPS trace needs at least 2 samples, got {speed.size}")
        if self.sample_rate_hz != GPS_RATE_HZ:
            raise RateMismatch(f"GPS rate must be {GPS_RATE_HZ:g} Hz, got {self.sample_rate_hz}")
        if not np.isfinite(speed).all():
            raise NonFiniteSample(None, f"non-finite speed at index {np.flatnonzero(~np.isfinite(speed))[0]}")
        if (speed < 0).any():
            raise InvalidValue(f"negative speed at index {np.flatnonzero(speed < 0)[0]}")
        object.__setattr__(self, "speed", speed)

    def __len__(self) -> int:
        return self.speed.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.start_time_s + np.arange(len(self)) / self.sample_rate_hz

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GpsTrace):
            return NotImplemented
        return self.start_time_s == other.start_time_s and np.array_equal(self.speed, other.speed)

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class ClipManifest:
    clip_id: str
    duration_s: float = 16.0
    fps: float = 30.0
    width: int = 1280
    height: int = 720
    frame_path_pattern: str = "frames/{index:06d}.jpg"
    source: Source = Source.PRIVATE
    imu_path: str | None = None
    gps_path: str | None = None
    semantic_path: str | None = None

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise InvalidValue("clip_id must be non-empty")
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise InvalidValue(f"{self.clip_id}: duration_s must be > 0")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise InvalidValue(f"{self.clip_id}: fps must be > 0")
        object.__setattr__(self, "source", Source(self.source))

    @property
    def total_frames(self) -> int:
        return max(1, int(math.floor(self.duration_s * self.fps + 1e-9)))

    def frame_path(self, index: int) -> str:
        return self.frame_path_pattern.format(index=index)

    def to_record(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "duration_s": self.duration_s,
            "fps": self.fps,
            "width": self.width,
            "height": self.height,
            "frame_path_pattern": self.frame_path_pattern,
            "source": self.source.value,
            "imu_path": self.imu_path,
            "gps_path": self.gps_path,
            "semantic_path": self.semantic_path,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ClipManifest":
        try:
            return cls(
                clip_id=str(rec["clip_id"]),
                duration_s=float(rec.get("duration_s", 16.0)),
                fps=float(rec.get("fps", 30.0)),
                width=int(rec.get("width", 1280)),
                height=int(rec.get("height", 720)),
                frame_path_pattern=str(rec.get("frame_path_pattern", "frames/{index:06d}.jpg")),
                source=Source(rec.get("source", "private")),
                imu_path=rec.get("imu_path"),
                gps_path=rec.get("gps_path"),
                semantic_path=rec.get("semantic_path"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, TelemetryError):
                raise
            raise InvalidValue(f"bad manifest record: {exc}") from None


def load_manifest(path: str | Path) -> list[ClipManifest]:
    """Read a manifest file; relative sensor paths stay relative to its directory."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such manifest: {path}")
    clips = [ClipManifest.from_record(rec) for rec in iter_records(path)]
    seen: set[str] = set()
    for clip in clips:
        if clip.clip_id in seen:
            raise InvalidValue(f"duplicate clip_id {clip.clip_id!r} in {path}")
        seen.add(clip.clip_id)
    return clips


def write_manifest(path: str | Path, clips: list[ClipManifest]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for clip in clips:
            fh.write(encode_record(clip.to_record()) + "\n")


def _parse_header(header: list[str], expected: tuple[str, ...]) -> list[float]:
    """Match a CSV header against the canonical one, allowing unit suffixes.

    Returns the per-column scale factor into canonical units.
    """
    if len(header) != len(expected):
        raise MalformedRow(1, f"expected {len(expected)} columns, got {len(header)}")
    factors = []
    for got, want in zip(header, expected):
        got = got.strip()
        stem, _, unit = want.partition("_")
        gstem, _, gunit = got.partition("_")
        if gstem != stem:
            raise MalformedRow(1, f"unexpected column {got!r} (want {want!r})")
        if stem == "t":
            table = {"s": 1.0}
        elif stem.startswith("a"):
            table = _ACCEL_UNITS
        elif stem.startswith("g"):
            table = _GYRO_UNITS
        else:
            table = _SPEED_UNITS
        if gunit not in table:
            raise MalformedRow(1, f"unsupported unit {gunit!r} in column {got!r}")
        factors.append(table[gunit])
    return factors


def _read_csv(path: str | Path, expected: tuple[str, ...]) -> tuple[np.ndarray, list[int]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    rows: list[list[float]] = []
    lines: list[int] = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        factors = _parse_header(header, expected)
        for row in reader:
            lineno = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(expected):
                raise MalformedRow(lineno, f"expected {len(expected)} fields, got {len(row)}")
            try:
                values = [float(c) for c in row]
            except ValueError:
                raise MalformedRow(lineno, f"unparseable number in {row!r}") from None
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteSample(lineno)
            rows.append([v * f if f != 1.0 else v for v, f in zip(values, factors)])
            lines.append(lineno)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(expected))
    return data, lines


def _check_rate(t: np.ndarray, lines: list[int], rate_hz: float) -> None:
    if t.size < 2:
        return
    dt = np.diff(t)
    bad = np.flatnonzero(dt <= 0)
    if bad.size:
        raise MalformedRow(lines[bad[0] + 1], "timestamps must be strictly increasing")
    nominal = 1.0 / rate_hz
    median = float(np.median(dt))
    if abs(median - nominal) > RATE_TOLERANCE * nominal:
        raise RateMismatch(
            f"median sample spacing {median * 1e3:.3f} ms, expected {nominal * 1e3:.3f} ms"
        )


def load_imu_trace(path: str | Path) -> ImuTrace:
    data, lines = _read_csv(path, IMU_HEADER)
    if data.shape[0] < 1:
        raise TooFewSamples(f"{path}: no samples")
    _check_rate(data[:, 0], lines, IMU_RATE_HZ)
    return ImuTrace(data[:, 1:4], data[:, 4:7], start_time_s=float(data[0, 0]))


def load_gps_trace(path: str | Path) -> GpsTrace:
    data, lines = _read_csv(path, GPS_HEADER)
    if data.shape[0] < 2:
        raise TooFewSamples(f"{path}: GPS needs at least 2 samples, got {data.shape[0]}")
    neg = np.flatnonzero(data[:, 1] < 0)
    if neg.size:
        raise InvalidValue(f"{path}: line {lines[neg[0]]}: negative speed {data[neg[0], 1]!r}")
    _check_rate(data[:, 0], lines, GPS_RATE_HZ)
    return GpsTrace(data[:, 1], start_time_s=float(data[0, 0]))


def write_imu_trace(trace: ImuTrace, path: str | Path) -> None:
    # repr() gives the shortest round-tripping decimal, so load(write(x)) == x
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IMU_HEADER)
        for t, a, g in zip(trace.times, trace.accel, trace.gyro):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in a), *(repr(float(v)) for v in g)])


def write_gps_trace(trace: GpsTrace, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GPS_HEADER)
        for t, v in zip(trace.times, trace.speed):
            w.writerow([repr(float(t)), repr(float(v))])
