import json
import logging
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_frames
from dashsync.prompts import build_bundle
from dashsync.semantic import Detection, SemanticMetadata, summarize_metadata
from dashsync.teacher import (
    AnnotationParseError,
    BadField,
    EmptyCaption,
    EndpointConfig,
    HttpResponse,
    MissingBlock,
    MockTeacherClient,
    QaKind,
    RateLimited,
    Timeout,
    TeacherClient,
    TransportError,
    UnknownSceLabel,
    annotate_all,
    mock_teacher,
    parse_annotations,
)
from dashsync.telemetry import SceClass

WELL_FORMED = """Sure! Here is my annotation.
===ANNOTATION===
CAPTION: A sedan cuts in and the ego vehicle brakes hard before hitting it.
Q[open]: What causes the impact?
A: The sedan merges without leaving enough room.
Q[closed]: What color is the sedan?
A: White.
SCE: collision
===END===
Let me know if you need more.
"""


def test_parse_well_formed():
    ann = parse_annotations(WELL_FORMED, "demo-1")
    assert ann.clip_id == "demo-1"
    assert ann.sce_label is SceClass.COLLISION
    assert [p.kind for p in ann.qa] == [QaKind.OPEN, QaKind.CLOSED]
    assert ann.qa[1].answer == "White."
    assert ann.raw_response == WELL_FORMED


def test_parse_missing_caption():
    raw = WELL_FORMED.replace("CAPTION: A sedan cuts in and the ego vehicle brakes hard before hitting it.\n", "")
    with pytest.raises(EmptyCaption):
        parse_annotations(raw, "x")


def test_parse_empty_caption():
    with pytest.raises(EmptyCaption):
        parse_annotations("===ANNOTATION===\nCAPTION:   \nSCE: normal\n===END===", "x")


def test_parse_noncanonical_label():
    with pytest.raises(UnknownSceLabel):
        parse_annotations(WELL_FORMED.replace("SCE: collision", "SCE: crash"), "x")


def test_parse_unknown_label_is_not_trainable():
    with pytest.raises(UnknownSceLabel):
        parse_annotations(WELL_FORMED.replace("SCE: collision", "SCE: unknown"), "x")


@pytest.mark.parametrize("raw", ["", "   ", "no block here", "===ANNOTATION===\nCAPTION: x\nSCE: normal\n"])
def test_parse_missing_block(raw):
    with pytest.raises(MissingBlock):
        parse_annotations(raw, "x")


@pytest.mark.parametrize("body,field", [
    ("CAPTION: c\nQ[open]: q\nSCE: normal", "A"),
    ("CAPTION: c\nQ[open]: q\nA:\nSCE: normal", "A"),
    ("CAPTION: c\nQ[maybe]: q\nA: a\nSCE: normal", "Q"),
    ("CAPTION: c\nQ[closed]: q\nA: one two three four five six\nSCE: normal", "A"),
    ("CAPTION: c", "SCE"),
    ("CAPTION: c\nSCE: normal\nextra", "SCE"),
    ("CAPTION: c\nCAPTION: d\nSCE: normal", "CAPTION"),
    ("CAPTION: c\n\nSCE: normal", "SCE"),
])
def test_parse_bad_fields(body, field):
    with pytest.raises(BadField) as err:
        parse_annotations(f"===ANNOTATION===\n{body}\n===END===\n", "x")
    assert err.value.name == field


def test_parse_tolerates_crlf():
    ann = parse_annotations(WELL_FORMED.replace("\n", "\r\n"), "x")
    assert ann.caption.endswith("hitting it.") and len(ann.qa) == 2


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=300))
def test_parser_total_on_arbitrary_text(raw):
    try:
        parse_annotations(raw, "x")
    except AnnotationParseError:
        pass


# --- mock teacher ---

def bundle_with(accel=(0.0, 0.0, 9.81), meta=None, include_imu=True, clip_id="demo-1"):
    frames = make_frames(accel=(0.0, 0.0, 9.81))
    frames[6] = frames[6].__class__(**{**frames[6].__dict__, "accel": tuple(accel)})
    meta = meta or SemanticMetadata(detections=(Detection(2, "car", 0.1, 0.1, 0.3, 0.3, 1),))
    return build_bundle(clip_id, frames, summarize_metadata(meta, frames), include_imu, t_e=6.0)


def test_mock_quotes_peak_and_labels_collision():
    raw = mock_teacher(bundle_with(accel=(-11.30, 0.0, 9.81)), seed=1)
    ann = parse_annotations(raw, "demo-1")
    assert "-11.30" in ann.caption
    assert ann.sce_label is SceClass.COLLISION


def test_mock_without_imu_uses_flags_only():
    calm = SemanticMetadata()
    crash = SemanticMetadata(crash_detected=True)
    b1 = bundle_with(accel=(-11.30, 0, 9.81), meta=calm, include_imu=False)
    b2 = bundle_with(meta=crash, include_imu=False)
    a1 = parse_annotations(mock_teacher(b1, 3), "demo-1")
    assert a1.sce_label is SceClass.NORMAL and "-11.30" not in a1.raw_response
    assert parse_annotations(mock_teacher(b2, 3), "demo-1").sce_label is SceClass.COLLISION


def test_mock_deterministic():
    b = bundle_with(accel=(-5.0, 0, 9.81))
    assert mock_teacher(b, 9).encode() == mock_teacher(b, 9).encode()
    assert parse_annotations(mock_teacher(b, 9), "demo-1").sce_label is SceClass.NEAR_COLLISION


bundle_strategy = st.builds(
    lambda ax, dets, crash, man, imu, cid: bundle_with(
        accel=(ax, 0.0, 9.81),
        meta=SemanticMetadata(crash_detected=crash, maneuver=man, detections=tuple(dets)),
        include_imu=imu,
        clip_id=cid,
    ),
    st.floats(-40, 40, allow_nan=False),
    st.lists(st.builds(
        lambda k, label, tid: Detection(k, label, 0.1, 0.1, 0.2, 0.2, tid),
        st.integers(1, 18),
        st.text(min_size=1, max_size=12),
        st.one_of(st.none(), st.integers(0, 5)),
    ), max_size=8),
    st.booleans(),
    st.one_of(st.none(), st.sampled_from(["HardBrake", "Swerve", "None", "Odd\nManeuver"])),
    st.booleans(),
    st.text(min_size=1, max_size=10),
)


@settings(max_examples=200, deadline=None)
@given(bundle_strategy, st.integers(0, 2**31))
def test_mock_roundtrip_never_errors(bundle, seed):
    ann = parse_annotations(mock_teacher(bundle, seed), bundle.clip_id)
    assert ann.caption and ann.sce_label.trainable


# --- endpoint client ---

class FakeTransport:
    def __init__(self, responses, delay=0.0):
        self.responses = list(responses)
        self.calls = []
        self.delay = delay
        self.in_flight = 0
        self.max_in_flight = 0
        self.lock = threading.Lock()

    def __call__(self, request, timeout):
        with self.lock:
            self.calls.append(request)
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            item = self.responses.pop(0) if self.responses else None
        try:
            if self.delay:
                time.sleep(self.delay)
            if isinstance(item, Exception):
                raise item
            return item
        finally:
            with self.lock:
                self.in_flight -= 1


def ok(text):
    return HttpResponse(200, json.dumps({"choices": [{"message": {"content": text}}]}).encode())


IMAGES = [f"f{k}.jpg" for k in range(1, 19)]


def test_429_then_200_retries_once(caplog):
    sleeps = []
    transport = FakeTransport([HttpResponse(429, b"", {"Retry-After": "2"}), ok(WELL_FORMED)])
    client = TeacherClient(EndpointConfig(backoff_base_s=0.5), transport, sleep=sleeps.append)
    with caplog.at_level(logging.INFO, logger="dashsync.teacher"):
        raw = client.request_annotations(bundle_with(), IMAGES)
    assert raw == WELL_FORMED
    assert client.retries["demo-1"] == 1
    assert sleeps == [2.0]
    assert "retry 1/3" in caplog.text


def test_retries_exhausted_surfaces_rate_limited():
    transport = FakeTransport([HttpResponse(429, b"")] * 10)
    client = TeacherClient(EndpointConfig(max_retries=3), transport, sleep=lambda s: None)
    with pytest.raises(RateLimited) as err:
        client.request_annotations(bundle_with(), IMAGES)
    assert err.value.clip_id == "demo-1"
    assert len(transport.calls) == 4


def test_exponential_backoff_and_timeout():
    sleeps = []
    transport = FakeTransport([TimeoutError("slow"), TimeoutError("slow"), TimeoutError("slow")])
    client = TeacherClient(EndpointConfig(max_retries=2, backoff_base_s=1.0), transport, sleep=sleeps.append)
    with pytest.raises(Timeout):
        client.request_annotations(bundle_with(), IMAGES)
    assert sleeps == [1.0, 2.0]


def test_client_error_not_retried():
    transport = FakeTransport([HttpResponse(400, b"bad")])
    client = TeacherClient(EndpointConfig(), transport, sleep=lambda s: None)
    with pytest.raises(TransportError):
        client.request_annotations(bundle_with(), IMAGES)
    assert len(transport.calls) == 1


def test_idempotent_on_clip_id():
    transport = FakeTransport([ok(WELL_FORMED)])
    client = TeacherClient(EndpointConfig(), transport, sleep=lambda s: None)
    b = bundle_with()
    assert client.request_annotations(b, IMAGES) == client.request_annotations(b, IMAGES)
    assert len(transport.calls) == 1


def test_openai_payload_shape(monkeypatch):
    monkeypatch.setenv("MY_TOKEN", "secret")
    transport = FakeTransport([ok(WELL_FORMED)])
    client = TeacherClient(EndpointConfig(base_url="http://h/v1/", token_env="MY_TOKEN", model="m"), transport)
    client.request_annotations(bundle_with(), IMAGES)
    req = transport.calls[0]
    assert req.url == "http://h/v1/chat/completions"
    assert req.headers["Authorization"] == "Bearer secret"
    payload = json.loads(req.body)
    user = payload["messages"][1]["content"]
    assert [p["image_url"]["url"] for p in user if p["type"] == "image_url"] == IMAGES


def test_concurrency_bound_never_exceeded():
    n = 12
    transport = FakeTransport([ok(WELL_FORMED)] * n, delay=0.02)
    client = TeacherClient(EndpointConfig(concurrency=3), transport, sleep=lambda s: None)
    jobs = [(bundle_with(clip_id=f"c{i:02d}"), IMAGES) for i in range(n)]
    results, report = annotate_all(client, jobs)
    assert sorted(results) == [f"c{i:02d}" for i in range(n)]
    assert transport.max_in_flight <= 3
    assert not report.failed


def test_annotate_all_records_failures():
    transport = FakeTransport([HttpResponse(429, b"")] * 4 + [ok("garbage")])
    client = TeacherClient(EndpointConfig(max_retries=3, concurrency=1), transport, sleep=lambda s: None)
    jobs = [(bundle_with(clip_id="a"), IMAGES), (bundle_with(clip_id="b"), IMAGES)]
    results, report = annotate_all(client, jobs)
    assert results == {}
    assert report.failed["a"].startswith("RateLimited")
    assert report.failed["b"].startswith("MissingBlock")


def test_mock_client_matches_mock_teacher():
    b = bundle_with(accel=(-11.3, 0, 9.81))
    client = MockTeacherClient(seed=5)
    assert client.request_annotations(b, IMAGES) == mock_teacher(b, 5)
