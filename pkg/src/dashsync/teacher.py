"""Teacher-model client, response grammar parser and deterministic mock.

The teacher replies with one fenced block::

    ===ANNOTATION===
    CAPTION: <one line>
    Q[open]: <text>
    A: <text>
    Q[closed]: <text>
    A: <text>
    SCE: <normal|near-collision|collision>
    ===END===

Text before ``===ANNOTATION===`` and after ``===END===`` is ignored; inside
the block every line must be one of the fields above, in that order
(caption first, any number of question/answer pairs, label last).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from dashsync.prompts import PromptBundle, flatten_for_wire
from dashsync.semantic import DEFAULT_THRESHOLDS, SceThresholds
from dashsync.telemetry import SceClass
from dashsync.textnorm import normalize_answer

log = logging.getLogger(__name__)

BLOCK_START = "===ANNOTATION==="
BLOCK_END = "===END==="
MAX_CLOSED_ANSWER_TOKENS = 5


# --- errors -----------------------------------------------------------------

class AnnotationParseError(ValueError):
    """The teacher response does not follow the annotation grammar."""

    def __init__(self, message: str, clip_id: str | None = None):
        super().__init__(f"{clip_id}: {message}" if clip_id else message)
        self.clip_id = clip_id


class MissingBlock(AnnotationParseError):
    pass


class BadField(AnnotationParseError):
    def __init__(self, name: str, detail: str = "", clip_id: str | None = None):
        super().__init__(f"bad field {name}" + (f": {detail}" if detail else ""), clip_id)
        self.name = name


class EmptyCaption(AnnotationParseError):
    pass


class UnknownSceLabel(AnnotationParseError):
    pass


class TeacherError(RuntimeError):
    """A request to the teacher endpoint failed."""

    retryable = False

    def __init__(self, message: str, clip_id: str | None = None):
        super().__init__(f"{clip_id}: {message}" if clip_id else message)
        self.clip_id = clip_id


class Timeout(TeacherError):
    retryable = True


class RateLimited(TeacherError):
    retryable = True

    def __init__(self, message: str, clip_id: str | None = None, retry_after: float | None = None):
        super().__init__(message, clip_id)
        self.retry_after = retry_after


class TransportError(TeacherError):
    def __init__(self, message: str, clip_id: str | None = None, retryable: bool = False):
        super().__init__(message, clip_id)
        self.retryable = retryable


# --- annotation types -------------------------------------------------------

class QaKind(str, Enum):
    OPEN = "open"
    CLOSED = "closed"


@dataclass(frozen=True)
class QaPair:
    question: str
    answer: str
    kind: QaKind

    def __post_init__(self) -> None:
        if not self.question.strip() or not self.answer.strip():
            raise ValueError("question and answer must be non-empty")
        if self.kind is QaKind.CLOSED and len(normalize_answer(self.answer).split()) > MAX_CLOSED_ANSWER_TOKENS:
            raise ValueError(f"closed answer longer than {MAX_CLOSED_ANSWER_TOKENS} tokens")


@dataclass(frozen=True)
class TeacherAnnotation:
    clip_id: str
    caption: str
    qa: tuple[QaPair, ...]
    sce_label: SceClass
    raw_response: str = ""

    def to_record(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "caption": self.caption,
            "qa": [[p.kind.value, p.question, p.answer] for p in self.qa],
            "sce_label": self.sce_label.value,
            "raw_response": self.raw_response,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "TeacherAnnotation":
        return cls(
            clip_id=rec["clip_id"],
            caption=rec["caption"],
            qa=tuple(QaPair(q, a, QaKind(kind)) for kind, q, a in rec["qa"]),
            sce_label=SceClass.from_token(rec["sce_label"]),
            raw_response=rec.get("raw_response", ""),
        )


# --- parser -----------------------------------------------------------------

_QUESTION = re.compile(r"Q\[(open|closed)\]:(.*)")


def _field_value(line: str, prefix: str) -> str | None:
    if line.startswith(prefix):
        return line[len(prefix):].strip()
    return None


def parse_annotations(raw: str, clip_id: str) -> TeacherAnnotation:
    """Strictly parse one annotation block out of a teacher response."""
    if not isinstance(raw, str) or not raw.strip():
        raise MissingBlock("empty response", clip_id)
    start = raw.find(BLOCK_START)
    if start < 0:
        raise MissingBlock(f"no {BLOCK_START} marker", clip_id)
    body_start = start + len(BLOCK_START)
    end = raw.find(BLOCK_END, body_start)
    if end < 0:
        raise MissingBlock(f"no {BLOCK_END} marker after the block start", clip_id)
    body = raw[body_start:end]
    lines = body.split("\n")
    # the markers sit on their own lines; tolerate CRLF
    if lines and not lines[0].strip():
        lines = lines[1:]
    if lines and not lines[-1].strip():
        lines = lines[:-1]
    lines = [ln.rstrip("\r") for ln in lines]

    if not lines or _field_value(lines[0], "CAPTION:") is None:
        raise EmptyCaption("block has no CAPTION field", clip_id)
    caption = _field_value(lines[0], "CAPTION:") or ""
    if not caption:
        raise EmptyCaption("caption is empty", clip_id)

    qa: list[QaPair] = []
    i = 1
    while i < len(lines) and lines[i].startswith("Q["):
        m = _QUESTION.fullmatch(lines[i])
        if m is None:
            raise BadField("Q", f"unrecognized question line {lines[i]!r}", clip_id)
        kind = QaKind(m.group(1))
        question = m.group(2).strip()
        if not question:
            raise BadField("Q", "empty question", clip_id)
        if i + 1 >= len(lines):
            raise BadField("A", "question without an answer", clip_id)
        answer = _field_value(lines[i + 1], "A:")
        if answer is None:
            raise BadField("A", f"expected answer line, got {lines[i + 1]!r}", clip_id)
        if not answer:
            raise BadField("A", "empty answer", clip_id)
        if kind is QaKind.CLOSED and len(normalize_answer(answer).split()) > MAX_CLOSED_ANSWER_TOKENS:
            raise BadField("A", f"closed answer exceeds {MAX_CLOSED_ANSWER_TOKENS} tokens", clip_id)
        qa.append(QaPair(question, answer, kind))
        i += 2

    if i >= len(lines):
        raise BadField("SCE", "missing label line", clip_id)
    label = _field_value(lines[i], "SCE:")
    if label is None:
        if lines[i].startswith("CAPTION:"):
            raise BadField("CAPTION", "duplicate caption", clip_id)
        raise BadField("SCE", f"expected label line, got {lines[i][:80]!r}", clip_id)
    try:
        sce = SceClass.from_token(label)
    except ValueError:
        raise UnknownSceLabel(f"unknown SCE label {label!r}", clip_id) from None
    if i + 1 != len(lines):
        raise BadField("SCE", "trailing lines after the label inside the block", clip_id)
    return TeacherAnnotation(clip_id, caption, tuple(qa), sce, raw)


# --- mock teacher -----------------------------------------------------------

_TELEMETRY = re.compile(
    r"t=(?P<t>[+-]\d+\.\d{2})s a=\[(?P<ax>-?\d+\.\d{2}),(?P<ay>-?\d+\.\d{2}),(?P<az>-?\d+\.\d{2})\]m/s2 "
    r"dA=(?P<dA>-?\d+\.\d{2})deg v=(?P<v>n/a|-?\d+\.\d{2})m/s"
)
_COUNTS = re.compile(r"^frame (\d+): ([^|]*?)(?: \||$)")
_SEVERITY = {SceClass.NORMAL: 0, SceClass.NEAR_COLLISION: 1, SceClass.COLLISION: 2}


def _one_line(text: str) -> str:
    # keep free text from forging a block marker
    return " ".join(text.split()).replace("===", "= =")


def _frame_counts(user_text: str) -> dict[int, dict[str, int]]:
    counts: dict[int, dict[str, int]] = {}
    for line in user_text.split("\n"):
        m = _COUNTS.match(line)
        if not m or m.group(2) == "no detections":
            continue
        per = {}
        for item in m.group(2).split(", "):
            label, sep, n = item.rpartition("×")
            if sep and n.isdigit():
                per[label] = int(n)
        if per:
            counts[int(m.group(1))] = per
    return counts


def _flag_label(header: str) -> SceClass:
    if "crash detected" in header:
        return SceClass.COLLISION
    if "harsh maneuver" in header or "violation" in header:
        return SceClass.NEAR_COLLISION
    return SceClass.NORMAL


def mock_teacher(bundle: PromptBundle, seed: int = 0, *,
                 thresholds: SceThresholds = DEFAULT_THRESHOLDS) -> str:
    """Grammar-conformant response derived only from the bundle's text.

    With telemetry the caption quotes the most extreme longitudinal value and
    the label is the more severe of that value's threshold class and the
    expert flags; without telemetry the expert flags alone decide.
    """
    user_text = bundle.user_text()
    digest = hashlib.sha256(bundle.to_bytes() + b"\0" + str(seed).encode()).digest()
    rng = random.Random(int.from_bytes(digest[:8], "big"))
    header = user_text.split("\n", 1)[0]
    label = _flag_label(header)

    peak = None
    speeds = []
    for m in _TELEMETRY.finditer(user_text):
        if peak is None or abs(float(m.group("ax"))) > abs(float(peak.group("ax"))):
            peak = m
        if m.group("v") != "n/a":
            speeds.append(m.group("v"))
    if bundle.include_imu and peak is not None:
        imu_label = thresholds.classify(abs(float(peak.group("ax"))))
        label = max(label, imu_label, key=_SEVERITY.__getitem__)

    counts = _frame_counts(user_text)
    totals: dict[str, int] = {}
    for per in counts.values():
        for name, n in per.items():
            totals[name] = max(totals.get(name, 0), n)
    objects = sorted(totals)

    event_text = {
        SceClass.COLLISION: rng.choice(["the ego vehicle is involved in a collision",
                                        "an impact occurs involving the ego vehicle"]),
        SceClass.NEAR_COLLISION: rng.choice(["the ego vehicle narrowly avoids a collision",
                                             "a near-collision forces an evasive reaction"]),
        SceClass.NORMAL: rng.choice(["the vehicle drives normally", "no safety-critical event occurs"]),
    }[label]
    scene_text = (
        "visible road users include " + ", ".join(_one_line(o) for o in objects)
        if objects else "no road users are detected"
    )
    if bundle.include_imu and peak is not None:
        caption = (
            f"Dashcam clip in which {event_text}; the longitudinal acceleration peaks at "
            f"{peak.group('ax')} m/s2 at t={peak.group('t')}s and {scene_text}."
        )
    else:
        caption = f"Dashcam clip in which {event_text}; {scene_text}."

    qa: list[tuple[str, str, str]] = []
    qa.append(("open", "What happens around the moment of the event?", event_text.capitalize() + "."))
    if speeds:
        qa.append(("open", "How does the vehicle speed evolve over the clip?",
                   f"The speed goes from {speeds[0]} m/s to {speeds[-1]} m/s."))
    qa.append(("closed", "Is there a collision in this clip?",
               "yes" if label is SceClass.COLLISION else "no"))
    if counts:
        k = rng.choice(sorted(counts))
        name = rng.choice(sorted(counts[k]))
        qa.append(("closed", f"How many {_one_line(name)} detections are in frame {k}?", str(counts[k][name])))
    else:
        qa.append(("closed", "Are any road users detected?", "no"))

    lines = [rng.choice(["Here is the annotation.", "Annotation follows."]), BLOCK_START,
             f"CAPTION: {_one_line(caption)}"]
    for kind, q, a in qa:
        lines.append(f"Q[{kind}]: {_one_line(q)}")
        lines.append(f"A: {_one_line(a)}")
    lines.append(f"SCE: {label.value}")
    lines.append(BLOCK_END)
    return "\n".join(lines) + "\n"


# --- endpoint client --------------------------------------------------------

@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000/v1"
    token_env: str = "DASHSYNC_TEACHER_TOKEN"
    model: str = "teacher"
    adapter: str = "openai_chat"
    max_retries: int = 3
    timeout_s: float = 120.0
    concurrency: int = 4
    backoff_base_s: float = 1.0

    @classmethod
    def load(cls, path: str | Path) -> "EndpointConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown endpoint config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class HttpRequest:
    url: str
    headers: dict[str, str]
    body: bytes


@dataclass(frozen=True)
class HttpResponse:
    status: int
    body: bytes
    headers: dict[str, str] = field(default_factory=dict)


class Transport(Protocol):
    def __call__(self, request: HttpRequest, timeout: float) -> HttpResponse: ...


def urllib_transport(request: HttpRequest, timeout: float) -> HttpResponse:
    req = urllib.request.Request(request.url, data=request.body, headers=request.headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return HttpResponse(resp.status, resp.read(), dict(resp.headers.items()))
    except urllib.error.HTTPError as exc:
        return HttpResponse(exc.code, exc.read() or b"", dict(exc.headers.items()) if exc.headers else {})


class OpenAIChatAdapter:
    """OpenAI-compatible ``/chat/completions`` envelope."""

    def build(self, cfg: EndpointConfig, bundle: PromptBundle, frame_images: Sequence[str]) -> HttpRequest:
        content = []
        for part in flatten_for_wire(bundle, frame_images):
            if part["type"] == "image":
                content.append({"type": "image_url", "image_url": {"url": part["ref"]}})
            else:
                content.append({"type": "text", "text": part["text"]})
        payload = {
            "model": cfg.model,
            "messages": [
                {"role": "system", "content": bundle.system_prompt},
                {"role": "user", "content": content},
            ],
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return HttpRequest(
            cfg.base_url.rstrip("/") + "/chat/completions",
            headers,
            json.dumps(payload, sort_keys=True).encode("utf-8"),
        )

    def parse(self, body: bytes) -> str:
        data = json.loads(body)
        return data["choices"][0]["message"]["content"]


ADAPTERS = {"openai_chat": OpenAIChatAdapter}


class TeacherClient:
    """Retrying, rate-aware client for a remote teacher endpoint.

    At most ``max_retries`` retries per clip with exponential backoff; a
    ``Retry-After`` header on 429 lengthens the wait. Responses are cached by
    clip_id, so asking twice for one clip sends one request.
    """

    def __init__(self, config: EndpointConfig, transport: Transport | None = None, *,
                 sleep: Callable[[float], None] = time.sleep):
        if config.adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {config.adapter!r}")
        self.config = config
        self.adapter = ADAPTERS[config.adapter]()
        self.transport = transport or urllib_transport
        self.sleep = sleep
        self.retries: dict[str, int] = {}
        self._cache: dict[str, str] = {}
        self._lock = threading.Lock()
        self._slots = threading.BoundedSemaphore(max(1, config.concurrency))

    @property
    def concurrency(self) -> int:
        return max(1, self.config.concurrency)

    def _attempt(self, request: HttpRequest, clip_id: str) -> str:
        try:
            with self._slots:
                resp = self.transport(request, self.config.timeout_s)
        except TimeoutError as exc:
            raise Timeout(f"no response within {self.config.timeout_s:g} s ({exc})", clip_id) from None
        except OSError as exc:
            raise TransportError(str(exc), clip_id, retryable=True) from None
        if resp.status == 429:
            retry_after = None
            for key, value in resp.headers.items():
                if key.lower() == "retry-after":
                    try:
                        retry_after = float(value)
                    except ValueError:
                        pass
            raise RateLimited("rate limited (HTTP 429)", clip_id, retry_after)
        if resp.status >= 500:
            raise TransportError(f"HTTP {resp.status}", clip_id, retryable=True)
        if resp.status != 200:
            raise TransportError(f"HTTP {resp.status}", clip_id)
        try:
            return self.adapter.parse(resp.body)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unreadable response body: {exc}", clip_id) from None

    def request_annotations(self, bundle: PromptBundle, frame_images: Sequence[str]) -> str:
        clip_id = bundle.clip_id
        with self._lock:
            if clip_id in self._cache:
                return self._cache[clip_id]
        request = self.adapter.build(self.config, bundle, frame_images)
        attempt = 0
        while True:
            try:
                text = self._attempt(request, clip_id)
                break
            except TeacherError as exc:
                if not exc.retryable or attempt >= self.config.max_retries:
                    with self._lock:
                        self.retries[clip_id] = attempt
                    raise
                delay = self.config.backoff_base_s * (2 ** attempt)
                if isinstance(exc, RateLimited) and exc.retry_after is not None:
                    delay = max(delay, exc.retry_after)
                attempt += 1
                log.info("clip %s: %s; retry %d/%d in %.2f s", clip_id, exc, attempt,
                         self.config.max_retries, delay)
                self.sleep(delay)
        with self._lock:
            self.retries[clip_id] = attempt
            self._cache[clip_id] = text
        return text


class MockTeacherClient:
    """Drop-in replacement for :class:`TeacherClient` backed by :func:`mock_teacher`."""

    def __init__(self, seed: int = 0, concurrency: int = 4, thresholds: SceThresholds = DEFAULT_THRESHOLDS):
        self.seed = seed
        self.concurrency = concurrency
        self.thresholds = thresholds
        self.retries: dict[str, int] = {}

    def request_annotations(self, bundle: PromptBundle, frame_images: Sequence[str]) -> str:
        flatten_for_wire(bundle, frame_images)
        self.retries[bundle.clip_id] = 0
        return mock_teacher(bundle, self.seed, thresholds=self.thresholds)


# --- batch annotation -------------------------------------------------------

@dataclass
class RunReport:
    """Per-run outcome table; every update goes through one lock."""

    succeeded: dict[str, int] = field(default_factory=dict)
    failed: dict[str, str] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def record_success(self, clip_id: str, retries: int) -> None:
        with self._lock:
            self.succeeded[clip_id] = retries
            self.failed.pop(clip_id, None)

    def record_failure(self, clip_id: str, error: Exception) -> None:
        with self._lock:
            self.failed[clip_id] = f"{type(error).__name__}: {error}"


class AnnotatingClient(Protocol):
    concurrency: int
    retries: dict[str, int]

    def request_annotations(self, bundle: PromptBundle, frame_images: Sequence[str]) -> str: ...


def annotate_all(client: AnnotatingClient, jobs: Iterable[tuple[PromptBundle, Sequence[str]]],
                 report: RunReport | None = None) -> tuple[dict[str, TeacherAnnotation], RunReport]:
    """Annotate many clips concurrently (bounded by ``client.concurrency``).

    Request and parse failures are recorded in the report, never raised.
    Results come back keyed by clip_id, independent of completion order.
    """
    report = report or RunReport()
    results: dict[str, TeacherAnnotation] = {}
    results_lock = threading.Lock()

    def work(job: tuple[PromptBundle, Sequence[str]]) -> None:
        bundle, images = job
        try:
            raw = client.request_annotations(bundle, images)
            ann = parse_annotations(raw, bundle.clip_id)
        except (TeacherError, AnnotationParseError, ValueError) as exc:
            log.warning("clip %s failed: %s", bundle.clip_id, exc)
            report.record_failure(bundle.clip_id, exc)
            return
        with results_lock:
            results[bundle.clip_id] = ann
        report.record_success(bundle.clip_id, client.retries.get(bundle.clip_id, 0))

    jobs = sorted(jobs, key=lambda j: j[0].clip_id)
    with ThreadPoolExecutor(max_workers=max(1, client.concurrency)) as pool:
        list(pool.map(work, jobs))
    return dict(sorted(results.items())), report
