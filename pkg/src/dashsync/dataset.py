"""Training examples, IMU drop-out, deterministic splits and dataset writing.

Both the drop-out decision and the split are keyed by clip_id, so every
example derived from one clip shares its split and its telemetry presence.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from dashsync.prompts import PromptTemplates, default_templates, render_student_prompt
from dashsync.records import write_records
from dashsync.sync import SyncedFrame
from dashsync.teacher import QaKind, TeacherAnnotation
from dashsync.telemetry import SceClass, Source

DROPOUT_PROBABILITY = 0.5
DEFAULT_SPLIT_RATIOS = (0.90, 0.05, 0.05)
_HALF = 1 << 63


class DatasetError(ValueError):
    pass


class BadRatios(DatasetError):
    pass


class DuplicateExampleId(DatasetError):
    pass


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Task(str, Enum):
    CAPTION = "caption"
    OPEN_QA = "open_qa"
    CLOSED_QA = "closed_qa"
    SCE_CLS = "sce_cls"


TASK_ORDER = {t: i for i, t in enumerate(Task)}


def hash64(*parts: str | int) -> int:
    """Stable 64-bit hash of the parts (unit-separator joined, BLAKE2b)."""
    data = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")


def imu_dropout_decision(run_seed: int, clip_id: str) -> bool:
    """Fair coin per (seed, clip): drop telemetry iff the hash is below 2**63."""
    return hash64(run_seed, clip_id) < _HALF


def _check_ratios(ratios: Sequence[float]) -> tuple[float, float, float]:
    if len(ratios) != 3:
        raise BadRatios(f"need three split ratios, got {len(ratios)}")
    r = tuple(float(x) for x in ratios)
    if any(not math.isfinite(x) or x < 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise BadRatios(f"split ratios must be non-negative and sum to 1, got {ratios}")
    return r  # type: ignore[return-value]


def split_unit(clip_id: str) -> float:
    return hash64("split", clip_id) / 2.0**64


def assign_split(clip_id: str, source: Source | str = Source.PRIVATE,
                 ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS) -> Split:
    """Split from a hash of clip_id alone.

    ``source`` does not move a clip between splits; it only decides which
    per-source test file a test clip lands in.
    """
    train, val, _ = _check_ratios(ratios)
    u = split_unit(clip_id)
    if u < train:
        return Split.TRAIN
    if u < train + val:
        return Split.VAL
    return Split.TEST


@dataclass(frozen=True)
class TrainingManifest:
    adapter_method: str = "DoRA"
    rank: int = 32
    alpha: int = 64
    learning_rate: float = 5e-5
    optimizer: str = "AdamW"
    batch_size: int = 32
    image_width: int = 420
    image_height: int = 240
    clip_seconds: float = 6.0
    fps: float = 3.0
    neftune_noise: float = 5.0
    frozen: tuple[str, ...] = ("vision_encoder", "projection")
    student_model_id: str = "Qwen2.5-VL-7B-Instruct"

    def to_record(self) -> dict:
        return {
            "adapter_method": self.adapter_method,
            "rank": self.rank,
            "alpha": self.alpha,
            "learning_rate": self.learning_rate,
            "optimizer": self.optimizer,
            "batch_size": self.batch_size,
            "image_resolution": [self.image_width, self.image_height],
            "clip_seconds": self.clip_seconds,
            "fps": self.fps,
            "neftune_noise": self.neftune_noise,
            "frozen": list(self.frozen),
            "student_model_id": self.student_model_id,
        }


@dataclass(frozen=True)
class TrainingExample:
    example_id: str
    clip_id: str
    source: Source
    split: Split
    task: Task
    frame_indices: tuple[int, ...]
    telemetry: tuple[tuple[float, float, float, float, float | None], ...] | None
    prompt_text: str
    target_text: str
    sce_label: SceClass
    template_version: str

    def to_record(self) -> dict:
        return {
            "example_id": self.example_id,
            "clip_id": self.clip_id,
            "source": self.source.value,
            "split": self.split.value,
            "task": self.task.value,
            "frame_indices": list(self.frame_indices),
            "telemetry": None if self.telemetry is None else [list(row) for row in self.telemetry],
            "prompt_text": self.prompt_text,
            "target_text": self.target_text,
            "sce_label": self.sce_label.value,
            "template_version": self.template_version,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "TrainingExample":
        tel = rec.get("telemetry")
        return cls(
            example_id=rec["example_id"],
            clip_id=rec["clip_id"],
            source=Source(rec["source"]),
            split=Split(rec["split"]),
            task=Task(rec["task"]),
            frame_indices=tuple(rec["frame_indices"]),
            telemetry=None if tel is None else tuple(tuple(row) for row in tel),
            prompt_text=rec["prompt_text"],
            target_text=rec["target_text"],
            sce_label=SceClass(rec["sce_label"]),
            template_version=rec["template_version"],
        )


def build_examples(annotation: TeacherAnnotation, frames: Sequence[SyncedFrame], drop_imu: bool, *,
                   t_e: float, source: Source | str = Source.PRIVATE,
                   ratios: Sequence[float] = DEFAULT_SPLIT_RATIOS,
                   templates: PromptTemplates | None = None) -> list[TrainingExample]:
    """One caption example, one per QA pair, one SCE classification example.

    Nexar-sourced clips never carry telemetry, whatever the drop-out coin says.
    """
    templates = templates or default_templates()
    source = Source(source)
    has_imu = source is not Source.NEXAR and all(f.has_telemetry for f in frames)
    include_imu = has_imu and not drop_imu
    telemetry = None
    if include_imu:
        telemetry = tuple(
            (f.accel[0], f.accel[1], f.accel[2], f.delta_angle, f.speed)  # type: ignore[index]
            for f in frames
        )
    split = assign_split(annotation.clip_id, source, ratios)
    common = dict(
        clip_id=annotation.clip_id,
        source=source,
        split=split,
        frame_indices=tuple(f.raw_frame_index for f in frames),
        telemetry=telemetry,
        sce_label=annotation.sce_label,
        template_version=templates.version,
    )

    def prompt(instruction: str) -> str:
        return render_student_prompt(frames, include_imu, t_e, instruction, templates=templates)

    cid = annotation.clip_id
    out = [TrainingExample(
        example_id=f"{cid}:caption:0",
        task=Task.CAPTION,
        prompt_text=prompt(templates.get("student_caption.txt")),
        target_text=annotation.caption,
        **common,
    )]
    for i, pair in enumerate(annotation.qa):
        task = Task.OPEN_QA if pair.kind is QaKind.OPEN else Task.CLOSED_QA
        out.append(TrainingExample(
            example_id=f"{cid}:{task.value}:{i}",
            task=task,
            prompt_text=prompt(pair.question),
            target_text=pair.answer,
            **common,
        ))
    out.append(TrainingExample(
        example_id=f"{cid}:sce_cls:0",
        task=Task.SCE_CLS,
        prompt_text=prompt(templates.get("student_sce.txt")),
        target_text=annotation.sce_label.value,
        **common,
    ))
    return out


def apply_source_caps(clip_sources: Mapping[str, Source | str], caps: Mapping[str, int]) -> set[str]:
    """Clip ids kept after capping the number of clips per source.

    Within a capped source the clips with the smallest hash are kept, so the
    selection does not depend on input order.
    """
    by_source: dict[str, list[str]] = {}
    for cid, src in clip_sources.items():
        by_source.setdefault(Source(src).value, []).append(cid)
    keep: set[str] = set()
    for src, cids in by_source.items():
        cap = caps.get(src)
        if cap is None or cap >= len(cids):
            keep.update(cids)
        else:
            keep.update(sorted(cids, key=lambda c: (hash64("cap", c), c))[:max(0, cap)])
    return keep


def _example_sort_key(ex: TrainingExample) -> tuple:
    return (ex.clip_id, TASK_ORDER[ex.task], ex.example_id)


@dataclass
class DatasetReport:
    run_seed: int
    n_clips: int = 0
    n_examples: int = 0
    dropout_decisions: int = 0
    telemetry_absent_clips: int = 0
    per_split: Counter = field(default_factory=Counter)
    per_task: Counter = field(default_factory=Counter)
    per_source: Counter = field(default_factory=Counter)
    per_split_source: Counter = field(default_factory=Counter)
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def dropout_rate(self) -> float:
        return self.dropout_decisions / self.n_clips if self.n_clips else 0.0

    def to_text(self) -> str:
        lines = [
            f"run_seed: {self.run_seed}",
            f"clips: {self.n_clips}",
            f"examples: {self.n_examples}",
            f"imu_dropout_decisions: {self.dropout_decisions}",
            f"imu_dropout_rate: {self.dropout_rate:.4f}",
            f"telemetry_absent_clips: {self.telemetry_absent_clips}",
        ]
        for title, counter in (("split", self.per_split), ("task", self.per_task), ("source", self.per_source),
                               ("split/source", self.per_split_source)):
            lines.append(f"[{title}]")
            for key in sorted(counter):
                lines.append(f"  {key}: {counter[key]}")
        lines.append(f"[failures] {len(self.failures)}")
        for cid in sorted(self.failures):
            lines.append(f"  {cid}: {self.failures[cid]}")
        return "\n".join(lines) + "\n"


def write_dataset(examples: Iterable[TrainingExample], out_dir: str | Path, *, run_seed: int,
                  manifest: TrainingManifest | None = None,
                  failures: Mapping[str, str] | None = None) -> DatasetReport:
    """Write ``train/val/test.<source>.records``, ``manifest.records`` and ``report.txt``.

    Every file is written (possibly empty) so directory listings are stable.
    Rows are ordered by clip_id, then task, then example_id.
    """
    examples = sorted(examples, key=_example_sort_key)
    seen: set[str] = set()
    for ex in examples:
        if ex.example_id in seen:
            raise DuplicateExampleId(f"duplicate example_id {ex.example_id!r}")
        seen.add(ex.example_id)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buckets: dict[str, list[dict]] = {"train.records": [], "val.records": []}
    for src in Source:
        buckets[f"test.{src.value}.records"] = []
    report = DatasetReport(run_seed=run_seed, failures=dict(failures or {}))
    clips: dict[str, TrainingExample] = {}
    for ex in examples:
        name = f"test.{ex.source.value}.records" if ex.split is Split.TEST else f"{ex.split.value}.records"
        buckets[name].append(ex.to_record())
        report.per_split[ex.split.value] += 1
        report.per_task[ex.task.value] += 1
        report.per_source[ex.source.value] += 1
        report.per_split_source[f"{ex.split.value}/{ex.source.value}"] += 1
        clips.setdefault(ex.clip_id, ex)

    report.n_examples = len(examples)
    report.n_clips = len(clips)
    report.dropout_decisions = sum(imu_dropout_decision(run_seed, cid) for cid in clips)
    report.telemetry_absent_clips = sum(ex.telemetry is None for ex in clips.values())

    for name, rows in buckets.items():
        write_records(out / name, rows)
    manifest_rec = (manifest or TrainingManifest()).to_record()
    manifest_rec["run_seed"] = run_seed
    write_records(out / "manifest.records", [manifest_rec])
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8", newline="\n")
    return report
