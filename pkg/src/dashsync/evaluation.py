"""Caption, closed-QA and SCE classification metrics.

ROUGE-L F1 is averaged per row (macro) over caption and open-QA rows. SCE
predictions in free text are mapped onto the three classes by keyword, with
near-collision phrases checked before the bare collision keywords.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from dashsync.dataset import Task
from dashsync.records import write_records
from dashsync.telemetry import TRAINABLE_CLASSES, SceClass
from dashsync.textnorm import normalize_answer, tokenize

__all__ = [
    "EmptyInput",
    "LengthMismatch",
    "PredictionRecord",
    "EvalReport",
    "ClassificationReport",
    "tokenize",
    "lcs_length",
    "rouge_l_f1",
    "normalize_answer",
    "closed_qa_accuracy",
    "parse_sce_prediction",
    "classification_report",
    "evaluate",
]

_NEAR = ("near-collision", "near collision", "near miss")
_COLLISION = ("collision", "crash", "impact")
_NORMAL = ("normal", "no event")


class EvalError(ValueError):
    pass


class EmptyInput(EvalError):
    pass


class LengthMismatch(EvalError):
    pass


@dataclass(frozen=True)
class PredictionRecord:
    example_id: str
    task: Task
    prediction_text: str
    reference_text: str
    sce_label: SceClass | None = None
    source: str = "private"


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length, O(|a|*|b|) time, O(min) memory."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(cur[j - 1] if cur[j - 1] > prev[j] else prev[j])
        prev = cur
    return prev[-1]


def rouge_l_f1(candidate: str, reference: str) -> float:
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def closed_qa_accuracy(rows: Iterable[PredictionRecord]) -> float:
    rows = [r for r in rows if r.task is Task.CLOSED_QA]
    if not rows:
        raise EmptyInput("no closed_qa rows to score")
    hits = sum(normalize_answer(r.prediction_text) == normalize_answer(r.reference_text) for r in rows)
    return hits / len(rows)


def parse_sce_prediction(text: str) -> SceClass:
    """Keyword mapping of free text; returns ``SceClass.UNKNOWN`` if nothing matches."""
    low = text.lower()
    if any(k in low for k in _NEAR):
        return SceClass.NEAR_COLLISION
    if any(k in low for k in _COLLISION):
        return SceClass.COLLISION
    if any(k in low for k in _NORMAL):
        return SceClass.NORMAL
    return SceClass.UNKNOWN


def _positive(c: SceClass) -> bool:
    return c in (SceClass.NEAR_COLLISION, SceClass.COLLISION)


@dataclass(frozen=True)
class ClassificationReport:
    n: int
    accuracy3: float
    tp: int
    fp: int
    fn: int
    tn: int
    precision_pos: float
    recall_pos: float
    accuracy2: float
    confusion3: dict[str, dict[str, int]]
    precision_undefined: bool = False
    recall_undefined: bool = False


def classification_report(preds: Sequence[SceClass], labels: Sequence[SceClass]) -> ClassificationReport:
    """3-class accuracy plus the SCE-vs-normal binary collapse.

    UNKNOWN predictions are wrong in the 3-class view and count as negative
    (normal) predictions in the binary view. Undefined precision or recall
    is reported as 0 with a warning.
    """
    if len(preds) != len(labels):
        raise LengthMismatch(f"{len(preds)} predictions vs {len(labels)} labels")
    if not labels:
        raise EmptyInput("no rows to classify")
    preds = [SceClass(p) for p in preds]
    labels = [SceClass(y) for y in labels]
    for y in labels:
        if not y.trainable:
            raise EvalError("labels must be normal, near-collision or collision")

    confusion = {y.value: {p.value: 0 for p in SceClass} for y in TRAINABLE_CLASSES}
    correct = 0
    tp = fp = fn = tn = 0
    for p, y in zip(preds, labels):
        confusion[y.value][p.value] += 1
        correct += p == y
        pp, yp = _positive(p), _positive(y)
        if pp and yp:
            tp += 1
        elif pp:
            fp += 1
        elif yp:
            fn += 1
        else:
            tn += 1
    n = len(labels)
    prec_undef = tp + fp == 0
    rec_undef = tp + fn == 0
    if prec_undef:
        warnings.warn("precision undefined (no positive predictions); reporting 0", RuntimeWarning, stacklevel=2)
    if rec_undef:
        warnings.warn("recall undefined (no positive labels); reporting 0", RuntimeWarning, stacklevel=2)
    return ClassificationReport(
        n=n,
        accuracy3=correct / n,
        tp=tp, fp=fp, fn=fn, tn=tn,
        precision_pos=0.0 if prec_undef else tp / (tp + fp),
        recall_pos=0.0 if rec_undef else tp / (tp + fn),
        accuracy2=(tp + tn) / n,
        confusion3=confusion,
        precision_undefined=prec_undef,
        recall_undefined=rec_undef,
    )


@dataclass(frozen=True)
class EvalReport:
    """Metric table for one slice of rows; ``None`` marks an empty cell."""

    n_rows: int
    n_rouge: int
    rouge_l_f1: float | None
    n_closed_qa: int
    closed_qa_accuracy: float | None
    n_sce: int
    sce: ClassificationReport | None
    n_bertscore: int = 0
    bertscore_f1: float | None = None
    per_source: dict[str, "EvalReport"] = field(default_factory=dict)

    def row(self) -> dict:
        sce = self.sce
        return {
            "n_rows": self.n_rows,
            "n_rouge": self.n_rouge,
            "rouge_l_f1": self.rouge_l_f1,
            "n_bertscore": self.n_bertscore,
            "bertscore_f1": self.bertscore_f1,
            "n_closed_qa": self.n_closed_qa,
            "closed_qa_accuracy": self.closed_qa_accuracy,
            "n_sce": self.n_sce,
            "sce3_accuracy": None if sce is None else sce.accuracy3,
            "sce2_precision_pos": None if sce is None else sce.precision_pos,
            "sce2_recall_pos": None if sce is None else sce.recall_pos,
            "sce2_accuracy": None if sce is None else sce.accuracy2,
            "sce2_tp": None if sce is None else sce.tp,
            "sce2_fp": None if sce is None else sce.fp,
            "sce2_fn": None if sce is None else sce.fn,
            "sce2_tn": None if sce is None else sce.tn,
        }


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _evaluate_slice(rows: Sequence[PredictionRecord], bertscores: Mapping[str, float]) -> EvalReport:
    rouge_rows = [r for r in rows if r.task in (Task.CAPTION, Task.OPEN_QA)]
    rouge = [rouge_l_f1(r.prediction_text, r.reference_text) for r in rouge_rows]
    bert = [float(bertscores[r.example_id]) for r in rouge_rows if r.example_id in bertscores]
    closed = [r for r in rows if r.task is Task.CLOSED_QA]
    sce_rows = [r for r in rows if r.task is Task.SCE_CLS]
    sce = None
    if sce_rows:
        preds = [parse_sce_prediction(r.prediction_text) for r in sce_rows]
        labels = [r.sce_label if r.sce_label is not None else SceClass.from_token(r.reference_text.strip())
                  for r in sce_rows]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            sce = classification_report(preds, labels)
    return EvalReport(
        n_rows=len(rows),
        n_rouge=len(rouge_rows),
        rouge_l_f1=_mean(rouge),
        n_closed_qa=len(closed),
        closed_qa_accuracy=closed_qa_accuracy(closed) if closed else None,
        n_sce=len(sce_rows),
        sce=sce,
        n_bertscore=len(bert),
        bertscore_f1=_mean(bert),
    )


def evaluate(rows: Sequence[PredictionRecord], bertscores: Mapping[str, float] | None = None) -> EvalReport:
    """Overall report plus one per source. BERTScores, if given, are external."""
    if not rows:
        raise EmptyInput("no prediction rows")
    bertscores = bertscores or {}
    overall = _evaluate_slice(rows, bertscores)
    by_source: dict[str, list[PredictionRecord]] = {}
    for r in rows:
        by_source.setdefault(r.source, []).append(r)
    per = {src: _evaluate_slice(by_source[src], bertscores) for src in sorted(by_source)}
    return EvalReport(**{**overall.__dict__, "per_source": per})


def join_predictions(predictions: Mapping[str, str], references: Sequence[Mapping]) -> list[PredictionRecord]:
    """Pair predictions with reference dataset rows by example_id.

    Both sides must cover exactly the same example ids.
    """
    ref_ids = [r["example_id"] for r in references]
    if len(set(ref_ids)) != len(ref_ids):
        raise EvalError("duplicate example_id among references")
    missing = sorted(set(ref_ids) - set(predictions))
    extra = sorted(set(predictions) - set(ref_ids))
    if missing or extra:
        raise LengthMismatch(
            f"{len(predictions)} predictions vs {len(ref_ids)} references "
            f"({len(missing)} without prediction, {len(extra)} without reference)"
        )
    rows = []
    for ref in sorted(references, key=lambda r: r["example_id"]):
        rows.append(PredictionRecord(
            example_id=ref["example_id"],
            task=Task(ref["task"]),
            prediction_text=predictions[ref["example_id"]],
            reference_text=ref["target_text"],
            sce_label=SceClass.from_token(ref["sce_label"]) if ref.get("sce_label") else None,
            source=ref.get("source", "private"),
        ))
    return rows


def _cell(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def format_report(report: EvalReport) -> str:
    cols = ["n_rows", "rouge_l_f1", "bertscore_f1", "closed_qa_accuracy", "sce3_accuracy",
            "sce2_precision_pos", "sce2_recall_pos", "sce2_accuracy"]
    table = [("all", report.row())] + [(src, r.row()) for src, r in report.per_source.items()]
    widths = [max(len("slice"), *(len(name) for name, _ in table))]
    widths += [max(len(c), *(len(_cell(row[c])) for _, row in table)) for c in cols]
    head = "  ".join(h.ljust(w) for h, w in zip(["slice", *cols], widths))
    lines = [head, "  ".join("-" * w for w in widths)]
    for name, row in table:
        cells = [name.ljust(widths[0])] + [_cell(row[c]).rjust(w) for c, w in zip(cols, widths[1:])]
        lines.append("  ".join(cells))
    if report.sce is not None:
        lines.append("")
        lines.append("SCE confusion (rows = label, cols = prediction):")
        classes = [c.value for c in SceClass]
        lines.append("  ".join(["label".ljust(14)] + [c.rjust(14) for c in classes]))
        for y, counts in report.sce.confusion3.items():
            lines.append("  ".join([y.ljust(14)] + [str(counts[c]).rjust(14) for c in classes]))
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval_report.txt").write_text(format_report(report), encoding="utf-8", newline="\n")
    records = [{"slice": "all", **report.row()}]
    records += [{"slice": src, **r.row()} for src, r in report.per_source.items()]
    write_records(out / "eval_report.records", records)
