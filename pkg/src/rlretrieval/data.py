"""Dataset schemas and ingestion for claims and document corpora.

File conventions (all UTF-8, line-delimited JSON):

* claims file -- first line is a header object ``{"label_set": [...],
  "split": "train"|"valid"|"test"}``; every following line is one claim
  record ``{"id": ..., "text": ..., "label": ..., "questions": [...]}``
  where ``questions`` is optional.
* corpus file -- one ``{"id": ..., "text": ...}`` object per line.
* exclusions file -- one document id per line; listed documents stay in
  the corpus but are invisible to retrieval.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

SPLITS = ("train", "valid", "test")


class DataFormatError(ValueError):
    """Raised when an input file violates the dataset format."""


@dataclass(frozen=True)
class Claim:
    id: str
    text: str
    gold: str
    questions: tuple[str, ...] = ()


@dataclass(frozen=True)
class Document:
    id: str
    text: str


@dataclass(frozen=True)
class ClaimSet:
    claims: tuple[Claim, ...]
    label_set: tuple[str, ...]
    split: str

    def __post_init__(self):
        if not self.label_set:
            raise DataFormatError("label_set must be non-empty")
        if len(set(self.label_set)) != len(self.label_set):
            raise DataFormatError("label_set contains duplicates")
        if self.split not in SPLITS:
            raise DataFormatError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for claim in self.claims:
            if claim.id in seen:
                raise DataFormatError(f"duplicate claim id {claim.id!r}")
            seen.add(claim.id)
            if not claim.text:
                raise DataFormatError(f"claim {claim.id!r} has empty text")
            # Gold-label membership is enforced by load_claims (with line numbers)
            # and reported by validate(); construction stays permissive so bad
            # sets can be inspected.
            if any(not q for q in claim.questions):
                raise DataFormatError(f"claim {claim.id!r} has an empty question")
            if len(set(claim.questions)) != len(claim.questions):
                raise DataFormatError(f"claim {claim.id!r} has duplicate questions")

    def __len__(self):
        return len(self.claims)

    def label_index(self, label: str) -> int:
        return self.label_set.index(label)


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    excluded_ids: frozenset[str] = frozenset()

    def __post_init__(self):
        seen = set()
        for doc in self.documents:
            if doc.id in seen:
                raise DataFormatError(f"duplicate document id {doc.id!r}")
            seen.add(doc.id)
            if not doc.text:
                raise DataFormatError(f"document {doc.id!r} has empty text")
        unknown = self.excluded_ids - seen
        if unknown:
            raise DataFormatError(f"excluded ids not in corpus: {sorted(unknown)}")

    def __len__(self):
        return len(self.documents)

    def retrievable(self) -> list[Document]:
        """Documents visible to retrieval, in corpus order."""
        return [d for d in self.documents if d.id not in self.excluded_ids]


@dataclass
class ValidationReport:
    claim_count: int = 0
    corpus_size: int = 0
    retrievable_size: int = 0
    label_histogram: dict[str, int] = field(default_factory=dict)
    claims_without_questions: list[str] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _parse_line(raw: str, lineno: int, path: str) -> dict:
    try:
        record = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}:{lineno}: malformed record: {exc}") from exc
    if not isinstance(record, dict):
        raise DataFormatError(f"{path}:{lineno}: record is not an object")
    return record


def load_claims(path: str) -> ClaimSet:
    """Load a claims file, validating records against its header label set.

    Input order is preserved. Errors name the offending line.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in (line.rstrip("\n") for line in fh) if ln.strip()]
    if not lines:
        raise DataFormatError(f"{path}: empty claims file")

    header = _parse_line(lines[0], 1, path)
    if "label_set" not in header:
        raise DataFormatError(f"{path}:1: header must declare label_set")
    label_set = tuple(str(x) for x in header["label_set"])
    split = str(header.get("split", "train"))

    claims = []
    seen_ids: set[str] = set()
    for lineno, raw in enumerate(lines[1:], start=2):
        record = _parse_line(raw, lineno, path)
        for key in ("id", "text", "label"):
            if key not in record:
                raise DataFormatError(f"{path}:{lineno}: record missing {key!r}")
        cid = str(record["id"])
        if cid in seen_ids:
            raise DataFormatError(f"{path}:{lineno}: duplicate claim id {cid!r}")
        seen_ids.add(cid)
        label = str(record["label"])
        if label not in label_set:
            raise DataFormatError(
                f"{path}:{lineno}: unknown label {label!r} (label_set={list(label_set)})"
            )
        questions = tuple(str(q) for q in record.get("questions", []))
        claims.append(Claim(id=cid, text=str(record["text"]), gold=label, questions=questions))

    return ClaimSet(claims=tuple(claims), label_set=label_set, split=split)


def save_claims(claims: ClaimSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {"label_set": list(claims.label_set), "split": claims.split}
        fh.write(json.dumps(header, ensure_ascii=False) + "\n")
        for claim in claims.claims:
            record = {"id": claim.id, "text": claim.text, "label": claim.gold}
            if claim.questions:
                record["questions"] = list(claim.questions)
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_corpus(path: str, exclusions: str | None = None) -> Corpus:
    """Load a corpus file plus an optional exclusion list of document ids."""
    documents = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            record = _parse_line(raw.rstrip("\n"), lineno, path)
            for key in ("id", "text"):
                if key not in record:
                    raise DataFormatError(f"{path}:{lineno}: record missing {key!r}")
            did = str(record["id"])
            if did in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate document id {did!r}")
            seen.add(did)
            text = str(record["text"])
            if not text:
                raise DataFormatError(f"{path}:{lineno}: document {did!r} has empty text")
            documents.append(Document(id=did, text=text))

    excluded: frozenset[str] = frozenset()
    if exclusions is not None:
        with open(exclusions, encoding="utf-8") as fh:
            excluded = frozenset(ln.strip() for ln in fh if ln.strip())

    return Corpus(documents=tuple(documents), excluded_ids=excluded)


def save_corpus(corpus: Corpus, path: str, exclusions: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            fh.write(json.dumps({"id": doc.id, "text": doc.text}, ensure_ascii=False) + "\n")
    if exclusions is not None:
        with open(exclusions, "w", encoding="utf-8") as fh:
            for did in sorted(corpus.excluded_ids):
                fh.write(did + "\n")


def validate(claims: ClaimSet, corpus: Corpus) -> ValidationReport:
    """Cross-check a claim set against a corpus. Report-only, never mutates."""
    report = ValidationReport(
        claim_count=len(claims),
        corpus_size=len(corpus),
        retrievable_size=len(corpus.retrievable()),
    )
    histogram = Counter(c.gold for c in claims.claims)
    report.label_histogram = {label: histogram.get(label, 0) for label in claims.label_set}
    for label in sorted(set(histogram) - set(claims.label_set)):
        report.label_histogram[label] = histogram[label]
    report.claims_without_questions = [c.id for c in claims.claims if not c.questions]
    for claim in claims.claims:
        if claim.gold not in claims.label_set:
            report.violations.append(
                f"claim {claim.id!r} has gold label {claim.gold!r} outside label_set"
            )
    if report.retrievable_size == 0:
        report.violations.append("corpus has no retrievable documents")
    return report
