"""Command-line entry point: ``dashsync synth | sync | annotate | build | eval``.

Stages hand off through files only, so any stage can be rerun alone. Exit
codes: 0 success, 1 runtime failure (including any failed clip), 2 usage
error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from dashsync.dataset import (
    DEFAULT_SPLIT_RATIOS,
    BadRatios,
    _check_ratios,
    apply_source_caps,
    build_examples,
    imu_dropout_decision,
    write_dataset,
)
from dashsync.evaluation import EvalError, evaluate, join_predictions, write_report
from dashsync.prompts import PromptTemplates, build_bundle, default_templates
from dashsync.records import read_records, write_records
from dashsync.semantic import SemanticMetadata, load_semantic_metadata, summarize_metadata, write_semantic_metadata
from dashsync.sync import SyncedFrame, build_synced_sequence, format_sync_table
from dashsync.synth import profile_for, synth_semantic, synth_trace
from dashsync.teacher import (
    EndpointConfig,
    MockTeacherClient,
    RunReport,
    TeacherAnnotation,
    TeacherClient,
    annotate_all,
)
from dashsync.telemetry import (
    ClipManifest,
    SceClass,
    Source,
    load_gps_trace,
    load_imu_trace,
    load_manifest,
    write_gps_trace,
    write_imu_trace,
    write_manifest,
)

log = logging.getLogger("dashsync")

KINDS = ("normal", "near-collision", "collision", "mixed")
_MIXED_CYCLE = (SceClass.COLLISION, SceClass.NEAR_COLLISION, SceClass.NORMAL)


class UsageError(Exception):
    pass


def _clip_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --- synth ------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    out = Path(args.out)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    clips: list[ClipManifest] = []
    truths = []
    for i in range(args.n):
        cid = f"{args.prefix}-{i:04d}"
        seed = _clip_seed(args.seed, i)
        kind = _MIXED_CYCLE[i % 3] if args.kind == "mixed" else SceClass(args.kind)
        nexar = args.nexar_every > 0 and (i + 1) % args.nexar_every == 0
        profile = profile_for(kind, seed, args.duration)
        clip_dir = out / "clips" / cid
        clip_dir.mkdir(parents=True, exist_ok=True)
        rel = Path("clips") / cid
        write_semantic_metadata(
            SemanticMetadata(**{**synth_semantic(profile).__dict__, "clip_id": cid}),
            clip_dir / "semantic.records",
        )
        imu_path = gps_path = None
        if not nexar:
            imu, gps, truth = synth_trace(profile, args.duration)
            write_imu_trace(imu, clip_dir / "imu.csv")
            write_gps_trace(gps, clip_dir / "gps.csv")
            imu_path, gps_path = str(rel / "imu.csv"), str(rel / "gps.csv")
            truths.append(truth.to_record(cid))
        else:
            truths.append({"clip_id": cid, "kind": kind.value, "event_time_s": None, "seed": seed})
        clips.append(ClipManifest(
            clip_id=cid,
            duration_s=args.duration,
            source=Source.NEXAR if nexar else Source(args.source),
            frame_path_pattern=str(rel / "frames" / "{index:06d}.jpg"),
            imu_path=imu_path,
            gps_path=gps_path,
            semantic_path=str(rel / "semantic.records"),
        ))
    write_manifest(out / "manifest.records", clips)
    write_records(out / "ground_truth.records", truths)
    log.info("wrote %d synthetic clips to %s", len(clips), out)
    return 0


# --- sync -------------------------------------------------------------------

def _sync_one(base: Path, clip: ClipManifest):
    imu = load_imu_trace(base / clip.imu_path) if clip.imu_path else None
    gps = load_gps_trace(base / clip.gps_path) if clip.gps_path else None
    return build_synced_sequence(imu, gps, clip)


def cmd_sync(args: argparse.Namespace) -> int:
    manifest = Path(args.manifest)
    clips = load_manifest(manifest)
    base = manifest.parent
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(clip: ClipManifest):
        try:
            return clip, _sync_one(base, clip), None
        except (ValueError, OSError) as exc:
            return clip, None, exc

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = sorted(pool.map(work, clips), key=lambda r: r[0].clip_id)

    lines = [f"run_seed: {args.seed}"]
    failed = 0
    for clip, seq, err in results:
        if err is not None:
            failed += 1
            log.error("sync %s failed: %s", clip.clip_id, err)
            lines.append(f"{clip.clip_id} FAILED {type(err).__name__}: {err}")
            continue
        write_records(out / f"{clip.clip_id}.records", [f.to_record(seq.t_e) for f in seq.frames])
        if args.table:
            (out / f"{clip.clip_id}.txt").write_text(format_sync_table(seq), encoding="utf-8", newline="\n")
        lines.append(f"{clip.clip_id} ok t_e={seq.t_e:.2f} window=[{seq.window.t_start:.2f},{seq.window.t_end:.2f}]")
    lines.append(f"clips: {len(results)} ok: {len(results) - failed} failed: {failed}")
    (out / "sync_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return 1 if failed else 0


def load_synced(sync_dir: Path, clip_id: str) -> tuple[list[SyncedFrame], float]:
    rows = read_records(sync_dir / f"{clip_id}.records")
    frames = [SyncedFrame.from_record(r) for r in rows]
    t_e = float(rows[0]["t_e"]) if rows else 0.0
    return frames, t_e


# --- annotate ---------------------------------------------------------------

def cmd_annotate(args: argparse.Namespace) -> int:
    if not args.mock_teacher and not args.endpoint:
        raise UsageError("annotate needs --endpoint CONFIG or --mock-teacher")
    manifest = Path(args.manifest)
    clips = load_manifest(manifest)
    base = manifest.parent
    sync_dir = Path(args.sync_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ann_path, fail_path = out / "annotations.records", out / "failures.records"

    done: dict[str, dict] = {}
    if ann_path.exists():
        done = {r["clip_id"]: r for r in read_records(ann_path)}
    prior_failures: dict[str, str] = {}
    if fail_path.exists():
        prior_failures = {r["clip_id"]: r["error"] for r in read_records(fail_path)}

    templates = PromptTemplates.load(args.templates) if args.templates else default_templates()
    report = RunReport()
    jobs = []
    for clip in clips:
        cid = clip.clip_id
        if cid in done:
            continue
        if cid in prior_failures and not args.retry_failed:
            report.failed[cid] = prior_failures[cid]
            continue
        try:
            frames, t_e = load_synced(sync_dir, cid)
            meta = (load_semantic_metadata(base / clip.semantic_path) if clip.semantic_path
                    else SemanticMetadata())
            summary = summarize_metadata(meta, frames)
            bundle = build_bundle(cid, frames, summary, include_imu=not args.no_imu, t_e=t_e,
                                  n_qa=args.qa_per_clip, templates=templates)
        except (ValueError, OSError, KeyError) as exc:
            log.error("annotate %s: cannot build prompt: %s", cid, exc)
            report.record_failure(cid, exc)
            continue
        images = [clip.frame_path(f.raw_frame_index) for f in frames]
        jobs.append((bundle, images))

    if args.mock_teacher:
        client = MockTeacherClient(seed=args.seed, concurrency=args.jobs)
    else:
        cfg = EndpointConfig.load(args.endpoint)
        if args.jobs:
            cfg = EndpointConfig(**{**cfg.__dict__, "concurrency": args.jobs})
        client = TeacherClient(cfg)
    results, report = annotate_all(client, jobs, report)

    for cid, ann in results.items():
        done[cid] = ann.to_record()
    write_records(ann_path, [done[c] for c in sorted(done)])
    write_records(fail_path, [{"clip_id": c, "error": report.failed[c]} for c in sorted(report.failed)])
    lines = [
        f"run_seed: {args.seed}",
        f"teacher: {'mock' if args.mock_teacher else 'endpoint'}",
        f"requested: {len(jobs)}",
        f"annotated_total: {len(done)}",
        f"failed: {len(report.failed)}",
    ]
    lines += [f"  {c}: retries={report.succeeded[c]}" for c in sorted(report.succeeded)]
    lines += [f"  {c}: FAILED {report.failed[c]}" for c in sorted(report.failed)]
    (out / "annotate_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    return 1 if report.failed else 0


# --- build ------------------------------------------------------------------

def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
        return _check_ratios(parts)
    except (ValueError, BadRatios) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _parse_cap(text: str) -> tuple[str, int]:
    src, sep, n = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return Source(src).value, int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected SOURCE=N with SOURCE in {[s.value for s in Source]}") from None


def cmd_build(args: argparse.Namespace) -> int:
    clips = {c.clip_id: c for c in load_manifest(args.manifest)}
    ann_path = Path(args.annotations)
    if ann_path.is_dir():
        ann_path = ann_path / "annotations.records"
    annotations = [TeacherAnnotation.from_record(r) for r in read_records(ann_path)]
    failures: dict[str, str] = {}
    fail_path = ann_path.parent / "failures.records"
    if fail_path.exists():
        failures = {r["clip_id"]: r["error"] for r in read_records(fail_path)}

    templates = PromptTemplates.load(args.templates) if args.templates else default_templates()
    sources = {a.clip_id: clips[a.clip_id].source for a in annotations if a.clip_id in clips}
    keep = apply_source_caps(sources, dict(args.source_cap or []))
    examples = []
    for ann in sorted(annotations, key=lambda a: a.clip_id):
        if ann.clip_id not in clips:
            failures[ann.clip_id] = "annotation for a clip missing from the manifest"
            continue
        if ann.clip_id not in keep:
            continue
        clip = clips[ann.clip_id]
        frames, t_e = load_synced(Path(args.sync_dir), ann.clip_id)
        drop = args.no_imu or imu_dropout_decision(args.seed, ann.clip_id)
        examples += build_examples(ann, frames, drop, t_e=t_e, source=clip.source,
                                   ratios=args.ratios, templates=templates)
    report = write_dataset(examples, args.out, run_seed=args.seed, failures=failures)
    log.info("built %d examples from %d clips", report.n_examples, report.n_clips)
    return 0


# --- eval -------------------------------------------------------------------

def cmd_eval(args: argparse.Namespace) -> int:
    if args.references:
        ref_files = [Path(p) for p in args.references]
    elif args.dataset:
        ref_files = sorted(set(Path(args.dataset).glob(f"{args.split}.*records")))
    else:
        raise UsageError("eval needs --dataset DIR or --references FILE")
    references = [r for p in ref_files for r in read_records(p)]
    if args.source:
        references = [r for r in references if r.get("source") == args.source]
    predictions = {}
    for rec in read_records(args.predictions):
        if rec["example_id"] in predictions:
            raise EvalError(f"duplicate prediction for {rec['example_id']}")
        predictions[rec["example_id"]] = rec["prediction_text"]
    bertscores = None
    if args.bertscore:
        bertscores = {r["example_id"]: float(r["score"]) for r in read_records(args.bertscore)}
    rows = join_predictions(predictions, references)
    report = evaluate(rows, bertscores)
    write_report(report, args.out)
    return 0


# --- wiring -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dashsync", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--kind", choices=KINDS, default="mixed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=16.0)
    p.add_argument("--source", choices=[s.value for s in Source if s is not Source.NEXAR], default="private")
    p.add_argument("--nexar-every", type=int, default=0,
                   help="make every K-th clip a telemetry-free nexar clip (0 = never)")
    p.add_argument("--prefix", default="clip")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sync", help="align telemetry to the 18 event frames")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--table", action="store_true", help="also write a plain-text table per clip")
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("annotate", help="request teacher annotations")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sync-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--endpoint", help="endpoint config (JSON)")
    p.add_argument("--mock-teacher", action="store_true")
    p.add_argument("--retry-failed", action="store_true")
    p.add_argument("--no-imu", action="store_true", help="leave telemetry out of the teacher prompt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=4, help="max concurrent teacher requests")
    p.add_argument("--qa-per-clip", type=int, default=10)
    p.add_argument("--templates", help="directory of prompt templates")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("build", help="build the training dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sync-dir", required=True)
    p.add_argument("--annotations", required=True, help="annotations.records or the annotate output dir")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", type=_parse_ratios, default=DEFAULT_SPLIT_RATIOS,
                   help="train,val,test fractions (default 0.9,0.05,0.05)")
    p.add_argument("--no-imu", action="store_true", help="drop telemetry from every example")
    p.add_argument("--source-cap", type=_parse_cap, action="append", metavar="SOURCE=N")
    p.add_argument("--templates", help="directory of prompt templates")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="score predictions against dataset references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", help="dataset directory (reads <split>.*records)")
    p.add_argument("--references", nargs="+", help="explicit reference record files")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--source", choices=[s.value for s in Source])
    p.add_argument("--bertscore", help="external per-example scores (example_id, score)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (ValueError, OSError, KeyError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
