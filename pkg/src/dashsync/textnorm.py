"""Tokenization and answer normalization shared by parsing and scoring."""

from __future__ import annotations

import re

_NON_ALNUM = re.compile(r"[\W_]+")
_PUNCT = re.compile(r"[^\w\s]|_")
_ARTICLES = ("a", "an", "the")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return [tok for tok in _NON_ALNUM.split(text.lower()) if tok]


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, collapse whitespace, strip leading articles."""
    words = _PUNCT.sub(" ", text.lower()).split()
    while words and words[0] in _ARTICLES:
        words.pop(0)
    return " ".join(words)
