"""Teacher and student prompt rendering.

Templates live as plain-text files (``dashsync/templates`` by default) with
``str.format`` placeholders. The template version is the first 8 hex digits
of a SHA-256 over every template file, so any edit to the wording shows up in
the version stamped on each dataset row.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

from dashsync.semantic import MetadataSummary
from dashsync.sync import SyncedFrame

TEMPLATE_FILES = (
    "system_caption_and_qa.txt",
    "telemetry_line.txt",
    "student_caption.txt",
    "student_sce.txt",
)
TASK_PROFILES = ("caption_and_qa",)
DEFAULT_QA_PER_CLIP = 10
N_FRAMES = 18
TELEMETRY_MARKER = "a=["


class PromptError(ValueError):
    pass


class UnknownProfile(PromptError):
    pass


class FrameCountMismatch(PromptError):
    pass


@dataclass(frozen=True)
class FrameRef:
    k: int


@dataclass(frozen=True)
class Text:
    content: str


PromptSegment = Union[FrameRef, Text]


@dataclass(frozen=True)
class PromptTemplates:
    texts: dict[str, str] = field(hash=False)

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        texts = {}
        if directory is None:
            root = resources.files("dashsync") / "templates"
            for name in TEMPLATE_FILES:
                texts[name] = (root / name).read_text(encoding="utf-8")
        else:
            root_path = Path(directory)
            for name in TEMPLATE_FILES:
                texts[name] = (root_path / name).read_text(encoding="utf-8")
        return cls(texts)

    @property
    def version(self) -> str:
        h = hashlib.sha256()
        for name in TEMPLATE_FILES:
            h.update(name.encode("utf-8") + b"\0")
            h.update(self.texts[name].encode("utf-8") + b"\0")
        return h.hexdigest()[:8]

    def get(self, name: str) -> str:
        return self.texts[name]


_DEFAULT: PromptTemplates | None = None


def default_templates() -> PromptTemplates:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = PromptTemplates.load()
    return _DEFAULT


@dataclass(frozen=True)
class PromptBundle:
    clip_id: str
    system_prompt: str
    user_segments: tuple[PromptSegment, ...]
    include_imu: bool
    template_version: str

    def user_text(self) -> str:
        return segments_to_text(self.user_segments)

    def to_bytes(self) -> bytes:
        """Canonical serialization used for hashing and mock determinism."""
        parts = [
            f"clip_id={self.clip_id}",
            f"template_version={self.template_version}",
            f"include_imu={int(self.include_imu)}",
            "--- system ---",
            self.system_prompt,
            "--- user ---",
            self.user_text(),
        ]
        return "\n".join(parts).encode("utf-8")


def segments_to_text(segments: Sequence[PromptSegment]) -> str:
    """Flatten segments to text, writing each frame reference as ``<frame:k>``."""
    out = []
    for seg in segments:
        if isinstance(seg, FrameRef):
            out.append(f"<frame:{seg.k}>")
        else:
            out.append(seg.content)
    return "\n".join(out)


def render_system_prompt(task_profile: str = "caption_and_qa", *,
                         n_qa: int = DEFAULT_QA_PER_CLIP,
                         templates: PromptTemplates | None = None) -> str:
    if task_profile not in TASK_PROFILES:
        raise UnknownProfile(f"unknown task profile {task_profile!r}")
    templates = templates or default_templates()
    return templates.get("system_caption_and_qa.txt").format(n_qa=n_qa)


def _fixed(value: float, signed: bool = False) -> str:
    text = f"{value:+.2f}" if signed else f"{value:.2f}"
    # a value that rounds to zero prints without a minus sign
    if text.lstrip("+-") == "0.00":
        return "+0.00" if signed else "0.00"
    return text


def format_telemetry_line(frame: SyncedFrame, t_e: float, *, templates: PromptTemplates | None = None) -> str:
    """``t=+0.33s a=[..]m/s2 dA=..deg v=..m/s`` with time relative to the event."""
    if frame.accel is None or frame.delta_angle is None:
        raise PromptError(f"frame {frame.k} carries no telemetry")
    templates = templates or default_templates()
    ax, ay, az = frame.accel
    return templates.get("telemetry_line.txt").rstrip("\n").format(
        t_rel=_fixed(frame.t_k - t_e, signed=True),
        ax=_fixed(ax),
        ay=_fixed(ay),
        az=_fixed(az),
        dA=_fixed(frame.delta_angle),
        v="n/a" if frame.speed is None else _fixed(frame.speed),
    )


def _check_frames(frames: Sequence[SyncedFrame]) -> None:
    if len(frames) != N_FRAMES:
        raise FrameCountMismatch(f"expected {N_FRAMES} frames, got {len(frames)}")
    if [f.k for f in frames] != list(range(1, N_FRAMES + 1)):
        raise FrameCountMismatch("frame ordinals must be 1..18 in order")


def render_user_prompt(frames: Sequence[SyncedFrame], meta_summary: MetadataSummary, include_imu: bool,
                       t_e: float, *, templates: PromptTemplates | None = None) -> tuple[PromptSegment, ...]:
    """Expert-flag header, then each frame reference followed by its text.

    With ``include_imu`` false, or for frames without telemetry, no telemetry
    line is emitted at all.
    """
    _check_frames(frames)
    if len(meta_summary.frame_lines) != len(frames):
        raise FrameCountMismatch("semantic summary is not aligned with the frames")
    segments: list[PromptSegment] = [Text(meta_summary.header)]
    for frame, sem_line in zip(frames, meta_summary.frame_lines):
        segments.append(FrameRef(frame.k))
        if include_imu and frame.has_telemetry:
            segments.append(Text(format_telemetry_line(frame, t_e, templates=templates)))
        segments.append(Text(sem_line))
    return tuple(segments)


def build_bundle(clip_id: str, frames: Sequence[SyncedFrame], meta_summary: MetadataSummary, include_imu: bool,
                 t_e: float, *, n_qa: int = DEFAULT_QA_PER_CLIP,
                 templates: PromptTemplates | None = None) -> PromptBundle:
    templates = templates or default_templates()
    include_imu = include_imu and all(f.has_telemetry for f in frames)
    return PromptBundle(
        clip_id=clip_id,
        system_prompt=render_system_prompt("caption_and_qa", n_qa=n_qa, templates=templates),
        user_segments=render_user_prompt(frames, meta_summary, include_imu, t_e, templates=templates),
        include_imu=include_imu,
        template_version=templates.version,
    )


def render_student_prompt(frames: Sequence[SyncedFrame], include_imu: bool, t_e: float, instruction: str, *,
                          templates: PromptTemplates | None = None) -> str:
    """Prompt seen by the student: frames, optional telemetry, one instruction.

    Expert outputs are deliberately absent; they only shape the targets.
    """
    _check_frames(frames)
    segments: list[PromptSegment] = []
    for frame in frames:
        segments.append(FrameRef(frame.k))
        if include_imu and frame.has_telemetry:
            segments.append(Text(format_telemetry_line(frame, t_e, templates=templates)))
    segments.append(Text(instruction.strip()))
    return segments_to_text(segments)


def flatten_for_wire(bundle: PromptBundle, frame_images: Sequence[str]) -> list[dict]:
    """Ordered ``{"type": "image"|"text", ...}`` parts for transport adapters."""
    n_refs = sum(isinstance(s, FrameRef) for s in bundle.user_segments)
    if len(frame_images) != n_refs:
        raise FrameCountMismatch(f"{n_refs} frame references but {len(frame_images)} images")
    parts: list[dict] = []
    for seg in bundle.user_segments:
        if isinstance(seg, FrameRef):
            parts.append({"type": "image", "ref": frame_images[seg.k - 1]})
        else:
            parts.append({"type": "text", "text": seg.content})
    return parts
