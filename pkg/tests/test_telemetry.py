import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dashsync.telemetry import (
    STANDARD_GRAVITY,
    ClipManifest,
    GpsTrace,
    ImuTrace,
    InvalidValue,
    MalformedRow,
    MissingFile,
    NonFiniteSample,
    RateMismatch,
    SceClass,
    Source,
    TooFewSamples,
    load_gps_trace,
    load_imu_trace,
    load_manifest,
    write_gps_trace,
    write_imu_trace,
    write_manifest,
)


def write_imu_csv(path, n=1600, dt=0.01, header="t_s,ax_mps2,ay_mps2,az_mps2,gx_dps,gy_dps,gz_dps", rows=None):
    lines = [header]
    for i in range(n):
        lines.append(rows[i] if rows and i in rows else f"{i * dt!r},0.1,0.2,9.81,0.0,0.0,{i % 7}")
    path.write_text("\n".join(lines) + "\n")
    return path


def write_gps_csv(path, speeds, header="t_s,speed_mps"):
    lines = [header] + [f"{float(i)!r},{v}" for i, v in enumerate(speeds)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_load_imu_1600_rows(tmp_path):
    trace = load_imu_trace(write_imu_csv(tmp_path / "imu.csv"))
    assert len(trace) == 1600
    assert trace.accel.shape == (1600, 3)
    assert trace.gyro_z[8] == 1.0
    assert trace.start_time_s == 0.0


def test_imu_nan_row_reports_line(tmp_path):
    path = write_imu_csv(tmp_path / "imu.csv", rows={10: "0.1,NaN,0,0,0,0,0"})
    with pytest.raises(NonFiniteSample) as err:
        load_imu_trace(path)
    assert err.value.line == 12  # header is line 1


def test_imu_20ms_spacing_is_rate_mismatch(tmp_path):
    with pytest.raises(RateMismatch):
        load_imu_trace(write_imu_csv(tmp_path / "imu.csv", n=800, dt=0.02))


def test_imu_rate_within_one_percent_accepted(tmp_path):
    trace = load_imu_trace(write_imu_csv(tmp_path / "imu.csv", n=100, dt=0.01005))
    assert len(trace) == 100


def test_imu_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        load_imu_trace(tmp_path / "nope.csv")


@pytest.mark.parametrize("row", ["0.1,1,2,3", "0.1,a,0,0,0,0,0"])
def test_imu_malformed_row(tmp_path, row):
    with pytest.raises(MalformedRow) as err:
        load_imu_trace(write_imu_csv(tmp_path / "imu.csv", n=5, rows={2: row}))
    assert err.value.line == 4


def test_imu_bad_header(tmp_path):
    with pytest.raises(MalformedRow):
        load_imu_trace(write_imu_csv(tmp_path / "imu.csv", n=3, header="t,ax,ay,az,gx,gy,gz"))


def test_imu_g_unit_header_converts(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("t_s,ax_g,ay_g,az_g,gx_dps,gy_dps,gz_dps\n0.0,1,0,-0.5,0,0,0\n0.01,0,0,0,0,0,0\n")
    trace = load_imu_trace(path)
    assert trace.accel[0, 0] == STANDARD_GRAVITY
    assert trace.accel[0, 2] == -0.5 * STANDARD_GRAVITY


def test_gps_kmh_header_converts(tmp_path):
    path = write_gps_csv(tmp_path / "gps.csv", [36.0, 72.0], header="t_s,speed_kmh")
    trace = load_gps_trace(path)
    assert trace.speed.tolist() == pytest.approx([10.0, 20.0], abs=1e-12)


def test_load_gps_16_rows(tmp_path):
    trace = load_gps_trace(write_gps_csv(tmp_path / "gps.csv", [10.0] * 16))
    assert len(trace) == 16


def test_gps_single_row_too_few(tmp_path):
    with pytest.raises(TooFewSamples):
        load_gps_trace(write_gps_csv(tmp_path / "gps.csv", [10.0]))


def test_gps_negative_speed(tmp_path):
    with pytest.raises(InvalidValue):
        load_gps_trace(write_gps_csv(tmp_path / "gps.csv", [10.0, -1.0, 3.0]))


def test_gps_rate_mismatch(tmp_path):
    path = tmp_path / "gps.csv"
    path.write_text("t_s,speed_mps\n0.0,1\n2.0,1\n4.0,1\n")
    with pytest.raises(RateMismatch):
        load_gps_trace(path)


def test_traces_are_read_only():
    trace = ImuTrace(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        trace.accel[0, 0] = 1.0


def test_sce_class_tokens():
    assert [c.value for c in SceClass if c.trainable] == ["normal", "near-collision", "collision"]
    with pytest.raises(ValueError):
        SceClass.from_token("unknown")


finite = st.floats(allow_nan=False, allow_infinity=False, width=64, min_value=-1e6, max_value=1e6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 40), st.just(6)), elements=finite))
def test_imu_write_load_roundtrip_bit_exact(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "imu.csv"
    trace = ImuTrace(data[:, :3], data[:, 3:])
    write_imu_trace(trace, path)
    back = load_imu_trace(path)
    assert back == trace
    assert back.accel.tobytes() == trace.accel.tobytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1e4, allow_nan=False)))
def test_gps_write_load_roundtrip_bit_exact(tmp_path_factory, speed):
    path = tmp_path_factory.mktemp("rt") / "gps.csv"
    trace = GpsTrace(speed)
    write_gps_trace(trace, path)
    assert load_gps_trace(path) == trace


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 49), st.integers(0, 5), st.sampled_from([math.nan, math.inf, -math.inf]))
def test_non_finite_rejected_at_any_position(row, col, bad):
    accel = np.zeros((50, 3))
    gyro = np.zeros((50, 3))
    (accel if col < 3 else gyro)[row, col % 3] = bad
    with pytest.raises(NonFiniteSample):
        ImuTrace(accel, gyro)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 19), st.sampled_from(["nan", "inf", "-inf", "NaN"]))
def test_non_finite_rejected_at_load(tmp_path_factory, row, token):
    path = tmp_path_factory.mktemp("nf") / "imu.csv"
    write_imu_csv(path, n=20, rows={row: f"{row * 0.01!r},0,0,{token},0,0,0"})
    with pytest.raises(NonFiniteSample) as err:
        load_imu_trace(path)
    assert err.value.line == row + 2


def test_manifest_roundtrip_and_duplicates(tmp_path):
    clips = [
        ClipManifest("a", imu_path="a/imu.csv"),
        ClipManifest("b", duration_s=6.0, source=Source.NEXAR),
    ]
    write_manifest(tmp_path / "m.records", clips)
    assert load_manifest(tmp_path / "m.records") == clips
    write_manifest(tmp_path / "d.records", [clips[0], clips[0]])
    with pytest.raises(InvalidValue):
        load_manifest(tmp_path / "d.records")


@pytest.mark.parametrize("kwargs", [{"duration_s": 0}, {"fps": -1}, {"clip_id": ""}])
def test_manifest_invariants(kwargs):
    base = {"clip_id": "x"}
    with pytest.raises(InvalidValue):
        ClipManifest(**{**base, **kwargs})
