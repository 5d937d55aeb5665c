import hashlib
from importlib import resources

import pytest

from conftest import make_frames
from dashsync.prompts import (
    FrameCountMismatch,
    FrameRef,
    PromptTemplates,
    Text,
    UnknownProfile,
    build_bundle,
    flatten_for_wire,
    format_telemetry_line,
    render_system_prompt,
    render_student_prompt,
    render_user_prompt,
    segments_to_text,
)
from dashsync.semantic import SemanticMetadata, summarize_metadata
from dashsync.sync import SyncedFrame


def test_system_prompt_has_grammar_section():
    text = render_system_prompt("caption_and_qa")
    for marker in ("===ANNOTATION===", "CAPTION:", "Q[open]:", "Q[closed]:", "SCE:", "===END==="):
        assert marker in text


def test_system_prompt_deterministic():
    assert render_system_prompt().encode() == render_system_prompt().encode()


def test_unknown_profile():
    with pytest.raises(UnknownProfile):
        render_system_prompt("summarize")


def test_template_edit_changes_version_and_output(tmp_path):
    src = resources.files("dashsync") / "templates"
    for entry in src.iterdir():
        if entry.name.endswith(".txt"):
            (tmp_path / entry.name).write_text(entry.read_text(encoding="utf-8"), encoding="utf-8")
    same = PromptTemplates.load(tmp_path)
    base = PromptTemplates.load()
    assert same.version == base.version and len(base.version) == 8
    path = tmp_path / "system_caption_and_qa.txt"
    path.write_text(path.read_text() + "Be concise.\n")
    bumped = PromptTemplates.load(tmp_path)
    assert bumped.version != base.version
    h = lambda t: hashlib.sha256(render_system_prompt(templates=t).encode()).hexdigest()
    assert h(bumped) != h(base)


def frame_at(t, accel, dalpha, speed):
    return SyncedFrame(k=1, t_k=t, raw_frame_index=0, accel=accel, delta_angle=dalpha, speed=speed)


def test_telemetry_line_collision_frame():
    line = format_telemetry_line(frame_at(1.0, (-11.30, 0.0, 9.81), 0.0, 13.0), t_e=5.0)
    assert line == "t=-4.00s a=[-11.30,0.00,9.81]m/s2 dA=0.00deg v=13.00m/s"


def test_telemetry_line_zero_frame():
    line = format_telemetry_line(frame_at(5.0, (0.0, 0.0, 0.0), 0.0, 0.0), t_e=5.0)
    assert line == "t=+0.00s a=[0.00,0.00,0.00]m/s2 dA=0.00deg v=0.00m/s"


def test_telemetry_line_negative_delta_angle():
    dalpha = -(33 * 9 / 100)
    line = format_telemetry_line(frame_at(5.0, (0.0, 0.0, 0.0), dalpha, 0.0), t_e=5.0)
    assert "dA=-2.97deg" in line


def test_telemetry_line_negative_zero_prints_unsigned():
    line = format_telemetry_line(frame_at(5.0 - 1e-9, (-0.001, 0.0, 0.0), -0.0001, 0.0), t_e=5.0)
    assert line.startswith("t=+0.00s a=[0.00,")
    assert "dA=0.00deg" in line


def test_user_prompt_with_imu(frames, summary):
    segs = render_user_prompt(frames, summary, True, t_e=8.0)
    refs = [s.k for s in segs if isinstance(s, FrameRef)]
    assert refs == list(range(1, 19))
    tel = [s for s in segs if isinstance(s, Text) and "a=[" in s.content]
    assert len(tel) >= 18
    assert isinstance(segs[0], Text) and segs[0].content == summary.header


def test_user_prompt_without_imu_has_no_marker(frames, summary):
    segs = render_user_prompt(frames, summary, False, t_e=8.0)
    assert "a=[" not in segments_to_text(segs)
    assert sum(isinstance(s, FrameRef) for s in segs) == 18


def test_user_prompt_empty_metadata(frames):
    summary = summarize_metadata(SemanticMetadata(), frames)
    text = segments_to_text(render_user_prompt(frames, summary, True, t_e=8.0))
    assert text.count("no detections") == 18


def test_user_prompt_frame_count_mismatch(frames, summary):
    with pytest.raises(FrameCountMismatch):
        render_user_prompt(frames[:17], summary, True, t_e=8.0)


def test_user_prompt_is_pure(frames, summary):
    a = render_user_prompt(frames, summary, True, t_e=8.0)
    b = render_user_prompt(list(frames), summary, True, t_e=8.0)
    assert a == b
    assert segments_to_text(a).encode() == segments_to_text(b).encode()


def test_bundle_without_telemetry_frames_reports_no_imu(summary):
    frames = make_frames(telemetry=False)
    bundle = build_bundle("c", frames, summary, include_imu=True, t_e=8.0)
    assert not bundle.include_imu
    assert "a=[" not in bundle.user_text()


def test_student_prompt_omits_semantics(frames):
    text = render_student_prompt(frames, True, 8.0, "Describe.")
    assert text.count("<frame:") == 18 and "a=[" in text and "expert flags" not in text
    assert text.endswith("Describe.")
    assert "a=[" not in render_student_prompt(frames, False, 8.0, "Describe.")


def test_flatten_for_wire_orders_parts(frames, summary):
    bundle = build_bundle("c", frames, summary, include_imu=True, t_e=8.0)
    parts = flatten_for_wire(bundle, [f"img{k}.jpg" for k in range(1, 19)])
    images = [p["ref"] for p in parts if p["type"] == "image"]
    assert images == [f"img{k}.jpg" for k in range(1, 19)]
    assert parts[0] == {"type": "text", "text": summary.header}
    with pytest.raises(FrameCountMismatch):
        flatten_for_wire(bundle, ["only-one.jpg"])
