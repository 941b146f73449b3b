"""Tokenization shared by the embedder, the synthetic judge and the world generator."""

from __future__ import annotations

import re

_TOKEN_RE = re.compile(r"\w+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is dropped."""
    return _TOKEN_RE.findall(text.lower())
