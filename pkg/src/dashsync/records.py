"""Line-delimited record files shared by every stage.

One record per line, encoded as a JSON object with keys in sorted order,
compact separators and ASCII-only escaping, so that newlines and delimiters
inside string values can never break a line. Non-finite floats are refused.
See ``docs/formats.md`` for the full grammar.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping


class RecordError(ValueError):
    """A record line could not be decoded."""

    def __init__(self, path: str | Path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = str(path)
        self.line = line


def encode_record(record: Mapping[str, Any]) -> str:
    return json.dumps(
        record, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False
    )


def decode_record(line: str) -> dict[str, Any]:
    obj = json.loads(line)
    if not isinstance(obj, dict):
        raise ValueError("record is not a key-value object")
    return obj


def iter_records(path: str | Path) -> Iterator[dict[str, Any]]:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield decode_record(line)
            except ValueError as exc:
                raise RecordError(path, lineno, str(exc)) from None


def read_records(path: str | Path) -> list[dict[str, Any]]:
    return list(iter_records(path))


def write_records(path: str | Path, records: Iterable[Mapping[str, Any]]) -> int:
    """Write records to ``path`` (LF line endings); returns the number written."""
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(encode_record(rec))
            fh.write("\n")
            n += 1
    return n
