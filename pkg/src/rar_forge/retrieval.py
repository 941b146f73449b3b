"""Exact top-k inner-product retrieval over one user's profile."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ._text import tokenize
from .dataset import UserDocument, UserProfile

__all__ = [
    "Embedder",
    "HashedBowEmbedder",
    "ProfileIndex",
    "RetrievalConfig",
    "build_index",
    "search",
    "format_information",
    "dump_index",
    "NO_RESULTS",
]

NO_RESULTS = "No relevant information found."


class Embedder(Protocol):
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


class HashedBowEmbedder:
    """Unigram counts hashed into ``dimension`` buckets, then L2-normalized.

    Uses blake2b rather than ``hash()`` so vectors are stable across processes.
    """

    def __init__(self, dimension: int = 256):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self._bucket_cache: dict[str, int] = {}

    def bucket(self, token: str) -> int:
        b = self._bucket_cache.get(token)
        if b is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            b = int.from_bytes(digest, "little") % self.dimension
            self._bucket_cache[token] = b
        return b

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        for token in tokenize(text):
            vec[self.bucket(token)] += 1.0
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec


@dataclass(frozen=True)
class RetrievalConfig:
    top_k: int = 3

    def __post_init__(self) -> None:
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


@dataclass(frozen=True, eq=False)
class ProfileIndex:
    user_id: str
    doc_vectors: np.ndarray
    doc_refs: tuple[UserDocument, ...]
    embedder: Embedder

    def __len__(self) -> int:
        return len(self.doc_refs)


def build_index(profile: UserProfile, embedder: Embedder) -> ProfileIndex:
    if not profile.documents:
        raise ValueError("profile has no documents")
    matrix = np.vstack([np.asarray(embedder.embed(doc.text), dtype=np.float64) for doc in profile.documents])
    matrix.setflags(write=False)
    return ProfileIndex(
        user_id=profile.user_id,
        doc_vectors=matrix,
        doc_refs=tuple(profile.documents),
        embedder=embedder,
    )


def search(index: ProfileIndex, query: str, k: int) -> list[tuple[UserDocument, float]]:
    """Top ``min(k, |index|)`` documents by inner product; ties go to the earlier document."""
    if not query.strip():
        raise ValueError("search query must be non-empty")
    if k < 1:
        raise ValueError("k must be positive")
    q = np.asarray(index.embedder.embed(query), dtype=np.float64)
    scores = index.doc_vectors @ q
    # stable sort on the negated score keeps profile order within ties
    order = np.argsort(-scores, kind="stable")[: min(k, len(index))]
    return [(index.doc_refs[i], float(scores[i])) for i in order]


def format_information(results: Sequence[tuple[UserDocument, float]]) -> str:
    if not results:
        return NO_RESULTS
    return "\n".join(f"[{rank}] {doc.text}" for rank, (doc, _) in enumerate(results, start=1))


def dump_index(index: ProfileIndex, path: str | Path) -> None:
    """Debug dump: one ``{"doc_id", "vector"}`` JSON object per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for doc, row in zip(index.doc_refs, index.doc_vectors):
            fh.write(json.dumps({"doc_id": doc.id, "vector": row.tolist()}) + "\n")
