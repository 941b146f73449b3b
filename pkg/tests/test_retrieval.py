import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rar_forge.dataset import UserDocument, UserProfile
from rar_forge.retrieval import (
    NO_RESULTS,
    HashedBowEmbedder,
    RetrievalConfig,
    build_index,
    dump_index,
    format_information,
    search,
)


class TableEmbedder:
    """Looks vectors up by text, so tests control every score."""

    def __init__(self, table):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def embed(self, text):
        return self.table[text]


def profile_of(texts):
    return UserProfile("u", tuple(UserDocument(f"d{i}", t) for i, t in enumerate(texts)))


def test_two_dimensional_example():
    emb = TableEmbedder({"x": [1, 0], "y": [0, 1], "xy": [0.5, 0.5], "q": [1, 0]})
    index = build_index(profile_of(["x", "y", "xy"]), emb)
    assert len(index) == 3 and index.doc_vectors.shape == (3, 2)
    ((doc, score),) = search(index, "q", 1)
    assert doc.id == "d0" and score == 1.0
    assert [d.id for d, _ in search(index, "q", 3)] == ["d0", "d2", "d1"]


def test_clamping():
    emb = HashedBowEmbedder()
    index = build_index(profile_of(["one doc", "two doc"]), emb)
    assert len(search(index, "doc", 5)) == 2


def test_empty_query_rejected():
    index = build_index(profile_of(["a"]), HashedBowEmbedder())
    with pytest.raises(ValueError):
        search(index, "   ", 1)
    with pytest.raises(ValueError):
        RetrievalConfig(top_k=0)


def test_build_is_deterministic_and_frozen():
    texts = ["my diet is vegan", "I like chess", "where to live"]
    a = build_index(profile_of(texts), HashedBowEmbedder())
    b = build_index(profile_of(texts), HashedBowEmbedder())
    assert np.array_equal(a.doc_vectors, b.doc_vectors)
    with pytest.raises(ValueError):
        a.doc_vectors[0, 0] = 1.0


def test_empty_document_is_zero_row_and_ranked_last():
    emb = HashedBowEmbedder()
    index = build_index(profile_of(["", "vegan food", "unrelated words"]), emb)
    assert not index.doc_vectors[0].any()
    ranked = [d.id for d, _ in search(index, "vegan", 3)]
    assert ranked.index("d1") < ranked.index("d0")


@settings(max_examples=200, deadline=None)
@given(st.text(min_size=0, max_size=60), st.integers(1, 512))
def test_embedder_norm(text, dim):
    v = HashedBowEmbedder(dim).embed(text)
    assert v.shape == (dim,)
    if any(ch.isalnum() or ch == "_" for ch in text):
        assert abs(np.linalg.norm(v) - 1.0) < 1e-12
        # unit norm: dot product with itself is cosine 1
        assert abs(v @ v - 1.0) < 1e-12
    else:
        assert not v.any()


def test_embedder_stable_buckets():
    # frozen from a direct blake2b(digest_size=8) little-endian computation mod 256
    emb = HashedBowEmbedder(256)
    assert [emb.bucket(t) for t in ("vegan", "diet", "chess")] == [125, 185, 219]
    v = emb.embed("Vegan vegan diet")
    assert v[125] == pytest.approx(2 / np.sqrt(5)) and v[185] == pytest.approx(1 / np.sqrt(5))


def test_format_information():
    docs = [(UserDocument("a", "first"), 0.9), (UserDocument("b", "second"), 0.5)]
    assert format_information(docs) == "[1] first\n[2] second"
    assert format_information([]) == NO_RESULTS == "No relevant information found."


def test_format_follows_ranking():
    rng = np.random.default_rng(5)
    words = ["vegan", "chess", "boston", "nurse", "dog", "my", "is"]
    texts = [" ".join(rng.choice(words, size=4)) for _ in range(12)]
    index = build_index(profile_of(texts), HashedBowEmbedder())
    results = search(index, "vegan chess", 5)
    lines = format_information(results).split("\n")
    assert lines == [f"[{i + 1}] {d.text}" for i, (d, _) in enumerate(results)]


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_ranking_properties(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 30))
    vectors = rng.integers(-2, 3, size=(n + 1, 3)) / 4
    table = {f"t{i}": v for i, v in enumerate(vectors)}
    table["q"] = rng.integers(-2, 3, size=3) / 4
    emb = TableEmbedder(table)
    index = build_index(profile_of([f"t{i}" for i in range(n)]), emb)
    results = search(index, "q", n)
    scores = [s for _, s in results]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert [int(d.id[1:]) for d, _ in results] == oracles.top_k(vectors[:n], table["q"], n)
    # adding a document never lowers the best score
    bigger = build_index(profile_of([f"t{i}" for i in range(n + 1)]), emb)
    assert search(bigger, "q", 1)[0][1] >= scores[0]


def test_dump_index(tmp_path):
    index = build_index(profile_of(["a b", "c"]), HashedBowEmbedder(8))
    dump_index(index, tmp_path / "i.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "i.jsonl").read_text().splitlines()]
    assert [r["doc_id"] for r in rows] == ["d0", "d1"]
    assert np.allclose([r["vector"] for r in rows], index.doc_vectors)
