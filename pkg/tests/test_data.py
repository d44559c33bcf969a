import json
import math

import pytest

from rlretrieval.data import (
    Claim,
    ClaimSet,
    Corpus,
    DataFormatError,
    Document,
    load_claims,
    load_corpus,
    save_claims,
    save_corpus,
    validate,
)


def write_claims(path, label_set, records, split="train"):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"label_set": label_set, "split": split}) + "\n")
        for record in records:
            fh.write(json.dumps(record) + "\n")


def write_corpus(path, docs):
    with open(path, "w", encoding="utf-8") as fh:
        for did, text in docs:
            fh.write(json.dumps({"id": did, "text": text}) + "\n")


def test_load_claims_identity(tmp_path):
    path = tmp_path / "claims.jsonl"
    records = [
        {"id": "a", "text": "claim one", "label": "true"},
        {"id": "b", "text": "claim two", "label": "half", "questions": ["q1", "q2"]},
        {"id": "c", "text": "claim three", "label": "false"},
    ]
    write_claims(path, ["true", "half", "false"], records)
    cs = load_claims(str(path))
    assert len(cs) == 3
    assert cs.label_set == ("true", "half", "false")
    assert [c.id for c in cs.claims] == ["a", "b", "c"]
    assert cs.claims[1].questions == ("q1", "q2")


def test_load_claims_unknown_label(tmp_path):
    path = tmp_path / "claims.jsonl"
    write_claims(path, ["true", "half", "false"],
                 [{"id": "a", "text": "x", "label": "mostly"}])
    with pytest.raises(DataFormatError, match="unknown label 'mostly'"):
        load_claims(str(path))


def test_load_claims_duplicate_id(tmp_path):
    path = tmp_path / "claims.jsonl"
    write_claims(path, ["t", "f"],
                 [{"id": "a", "text": "x", "label": "t"},
                  {"id": "a", "text": "y", "label": "f"}])
    with pytest.raises(DataFormatError, match=":3: duplicate claim id"):
        load_claims(str(path))


def test_load_claims_malformed_record_names_line(tmp_path):
    path = tmp_path / "claims.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps({"label_set": ["t"]}) + "\n")
        fh.write("not json\n")
    with pytest.raises(DataFormatError, match=":2: malformed record"):
        load_claims(str(path))


def test_load_claims_sized_class_counts(tmp_path):
    # 2,012 claims over three classes with counts 695/671/646.
    path = tmp_path / "claims.jsonl"
    counts = {"true": 695, "half": 671, "false": 646}
    records = []
    i = 0
    for label, n in counts.items():
        for _ in range(n):
            records.append({"id": f"c{i}", "text": f"claim {i}", "label": label})
            i += 1
    write_claims(path, list(counts), records)
    cs = load_claims(str(path))
    assert len(cs) == 2012
    report = validate(cs, Corpus(documents=(Document("d0", "text"),)))
    assert report.label_histogram == counts


def test_load_corpus_plain(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, [(f"d{i}", f"doc {i}") for i in range(10)])
    corpus = load_corpus(str(path))
    assert len(corpus) == 10
    assert len(corpus.retrievable()) == 10


def test_load_corpus_exclusions(tmp_path):
    path = tmp_path / "corpus.jsonl"
    excl = tmp_path / "excl.txt"
    write_corpus(path, [(f"d{i}", f"doc {i}") for i in range(10)])
    excl.write_text("d3\nd7\n")
    corpus = load_corpus(str(path), str(excl))
    assert len(corpus) == 10
    retrievable = corpus.retrievable()
    assert len(retrievable) == 8
    assert all(d.id not in ("d3", "d7") for d in retrievable)


def test_load_corpus_exclusion_fraction(tmp_path):
    # Excluding 4.7% of ids leaves ceil(0.953 * N) within +/- 1.
    n = 1000
    path = tmp_path / "corpus.jsonl"
    excl = tmp_path / "excl.txt"
    write_corpus(path, [(f"d{i:04d}", f"doc {i}") for i in range(n)])
    excluded = [f"d{i:04d}" for i in range(0, n, round(1 / 0.047))]
    excl.write_text("\n".join(excluded) + "\n")
    corpus = load_corpus(str(path), str(excl))
    assert abs(len(corpus.retrievable()) - math.ceil(0.953 * n)) <= 1


def test_load_corpus_duplicate_id(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, [("d1", "a"), ("d1", "b")])
    with pytest.raises(DataFormatError, match="duplicate document id"):
        load_corpus(str(path))


def test_load_corpus_empty_text(tmp_path):
    path = tmp_path / "corpus.jsonl"
    write_corpus(path, [("d1", "")])
    with pytest.raises(DataFormatError, match="empty text"):
        load_corpus(str(path))


def test_validate_consistent_inputs(tmp_path):
    cs = ClaimSet(
        claims=(Claim("a", "x", "t"), Claim("b", "y", "f", questions=("q",))),
        label_set=("t", "f"),
        split="train",
    )
    corpus = Corpus(documents=(Document("d0", "text"),))
    report = validate(cs, corpus)
    assert report.ok
    assert report.claims_without_questions == ["a"]
    assert report.corpus_size == 1


def test_validate_reports_stray_gold_label():
    cs = ClaimSet(
        claims=(Claim("a", "x", "weird"),),
        label_set=("t", "f"),
        split="train",
    )
    report = validate(cs, Corpus(documents=(Document("d0", "text"),)))
    assert not report.ok
    assert any("weird" in v for v in report.violations)
    assert sum(report.label_histogram.values()) == 1


def test_validate_histogram_sums_to_claim_count():
    # Six classes, 12,590 claims.
    counts = [2021, 2439, 2592, 2057, 2465, 1016]
    labels = ("true", "mostly-true", "half-true", "barely-true", "false", "pants-fire")
    claims = []
    i = 0
    for label, n in zip(labels, counts):
        for _ in range(n):
            claims.append(Claim(f"c{i}", f"claim {i}", label))
            i += 1
    cs = ClaimSet(claims=tuple(claims), label_set=labels, split="train")
    report = validate(cs, Corpus(documents=(Document("d0", "text"),)))
    assert sum(report.label_histogram.values()) == 12590 == len(cs)
    assert len(report.label_histogram) == 6


def test_round_trip_claims(tmp_path):
    cs = ClaimSet(
        claims=(
            Claim("a", "first claim", "true", questions=("why?", "how?")),
            Claim("b", "second claim with unicode ’", "false"),
        ),
        label_set=("true", "false"),
        split="valid",
    )
    path = tmp_path / "out.jsonl"
    save_claims(cs, str(path))
    assert load_claims(str(path)) == cs


def test_round_trip_corpus(tmp_path):
    corpus = Corpus(
        documents=(Document("d1", "alpha"), Document("d2", "beta")),
        excluded_ids=frozenset({"d2"}),
    )
    path = tmp_path / "corpus.jsonl"
    excl = tmp_path / "excl.txt"
    save_corpus(corpus, str(path), str(excl))
    assert load_corpus(str(path), str(excl)) == corpus
