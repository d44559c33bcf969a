import numpy as np
import pytest

from rlretrieval.data import Corpus, Document
from rlretrieval.encoder import encode, featurize, init_params
from rlretrieval.index import (
    build,
    distribution,
    load_index,
    refresh,
    retrieve,
    save_index,
)


def make_corpus(n, excluded=()):
    docs = tuple(Document(f"d{i:03d}", f"document number {i} about token{i}") for i in range(n))
    return Corpus(documents=docs, excluded_ids=frozenset(excluded))


PARAMS = init_params(16, 512, seed=0)


def test_build_single_doc():
    idx = build(make_corpus(1), PARAMS)
    assert len(idx) == 1
    assert idx.matrix.shape == (1, 16)


def test_build_skips_excluded():
    idx = build(make_corpus(5, excluded={"d001", "d003"}), PARAMS)
    assert len(idx) == 3
    assert "d001" not in idx.ids and "d003" not in idx.ids


def test_build_empty_retrievable_corpus():
    with pytest.raises(ValueError, match="no retrievable"):
        build(make_corpus(2, excluded={"d000", "d001"}), PARAMS)


def test_build_rows_match_encode():
    corpus = make_corpus(50)
    idx = build(corpus, PARAMS)
    rng = np.random.default_rng(0)
    for i in rng.choice(50, size=5, replace=False):
        doc = corpus.documents[i]
        row = idx.matrix[idx.ids.index(doc.id)]
        np.testing.assert_array_equal(row, encode(PARAMS, featurize(doc.text, 512)))


def test_retrieve_self_similarity():
    # Disjoint token sets: a query equal to one document's text ranks it first.
    docs = tuple(
        Document(f"d{i:03d}", f"alpha{i} bravo{i} charlie{i}") for i in range(10)
    )
    corpus = Corpus(documents=docs)
    idx = build(corpus, PARAMS)
    result = retrieve(idx, corpus.documents[4].text, PARAMS, 3)
    assert result.ids[0] == "d004"


def test_retrieve_n_larger_than_corpus():
    idx = build(make_corpus(5), PARAMS)
    result = retrieve(idx, "anything at all", PARAMS, 50)
    assert len(result) == 5
    assert (np.diff(result.scores) <= 1e-15).all()


def test_retrieve_default_pool_size():
    idx = build(make_corpus(100), PARAMS)
    result = retrieve(idx, "document number 3", PARAMS, 20)
    assert len(result) == 20


def test_retrieve_matches_brute_force():
    corpus = make_corpus(100)
    idx = build(corpus, PARAMS)
    for qi in range(0, 100, 7):
        query = corpus.documents[qi].text
        hq = encode(PARAMS, featurize(query, 512))
        scores = {d.id: float(hq @ encode(PARAMS, featurize(d.text, 512))) for d in corpus.documents}
        expected = sorted(scores, key=lambda did: (-scores[did], did))[:10]
        got = retrieve(idx, query, PARAMS, 10)
        assert got.ids == expected


def test_retrieve_tie_break_ascending_id():
    docs = (
        Document("b", "same text here"),
        Document("a", "same text here"),
        Document("c", "other words entirely"),
    )
    idx = build(Corpus(documents=docs), PARAMS)
    result = retrieve(idx, "same text here", PARAMS, 3)
    assert result.ids[:2] == ["a", "b"]


def test_distribution_uniform():
    np.testing.assert_allclose(distribution(np.array([1.0, 1.0, 1.0]), 1.0), np.full(3, 1 / 3))


def test_distribution_hand_softmax():
    p = distribution(np.array([np.log(2.0), 0.0]), 1.0)
    np.testing.assert_allclose(p, [2 / 3, 1 / 3], atol=1e-12)


def test_distribution_argmax_consistency():
    rng = np.random.default_rng(1)
    for _ in range(20):
        scores = rng.normal(size=8)
        assert int(np.argmax(distribution(scores, 1.0))) == int(np.argmax(scores))


def test_distribution_sums_to_one():
    rng = np.random.default_rng(2)
    scores = rng.normal(scale=50, size=30)
    p = distribution(scores, 0.3)
    assert abs(p.sum() - 1.0) < 1e-12


def test_distribution_permutation_equivariance():
    rng = np.random.default_rng(3)
    scores = rng.normal(size=10)
    perm = rng.permutation(10)
    np.testing.assert_allclose(distribution(scores, 1.0)[perm], distribution(scores[perm], 1.0), atol=1e-15)


def test_distribution_shift_invariance():
    rng = np.random.default_rng(4)
    scores = rng.normal(size=10)
    np.testing.assert_allclose(
        distribution(scores, 2.0), distribution(scores + 123.0, 2.0), atol=1e-12
    )


def test_distribution_errors():
    with pytest.raises(ValueError, match="tau"):
        distribution(np.array([1.0]), 0.0)
    with pytest.raises(ValueError, match="non-empty"):
        distribution(np.array([]), 1.0)


def test_refresh_unchanged_params_identical():
    idx = build(make_corpus(20), PARAMS)
    idx.staleness = 50
    fresh = refresh(idx, PARAMS)
    np.testing.assert_array_equal(fresh.matrix, idx.matrix)
    assert fresh.staleness == 0
    assert fresh.fingerprint == idx.fingerprint


def test_refresh_tracks_new_params():
    corpus = make_corpus(20)
    idx = build(corpus, PARAMS)
    new_params = init_params(16, 512, seed=9)
    fresh = refresh(idx, new_params)
    assert fresh.fingerprint != idx.fingerprint
    for i, did in enumerate(fresh.ids):
        doc = next(d for d in corpus.documents if d.id == did)
        np.testing.assert_array_equal(
            fresh.matrix[i], encode(new_params, featurize(doc.text, 512))
        )


def test_index_file_round_trip(tmp_path):
    idx = build(make_corpus(10), PARAMS)
    path = tmp_path / "index.bin"
    save_index(str(path), idx)
    loaded = load_index(str(path))
    assert loaded.ids == idx.ids
    np.testing.assert_array_equal(loaded.matrix, idx.matrix)
    assert loaded.fingerprint == idx.fingerprint


def test_index_file_deterministic_bytes(tmp_path):
    idx = build(make_corpus(10), PARAMS)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    save_index(str(p1), idx)
    save_index(str(p2), idx)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_index_cannot_refresh(tmp_path):
    idx = build(make_corpus(3), PARAMS)
    path = tmp_path / "index.bin"
    save_index(str(path), idx)
    loaded = load_index(str(path))
    with pytest.raises(ValueError, match="rebuild"):
        refresh(loaded, PARAMS)
