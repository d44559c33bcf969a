"""Dense corpus index with exact inner-product retrieval.

The index is flat: one embedding row per retrievable document, scored
against a freshly encoded query by brute-force inner product. It exists
only to pick candidate sets; policy probabilities and gradients are always
recomputed from current encoder parameters at episode time, and the index
is refreshed periodically by the trainer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, Document
from .encoder import EncoderParams, FeatureVector, encode, featurize

_INDEX_MAGIC = b"RRIDX1\n\0"


@dataclass
class RankedCandidates:
    """Top-n retrieval result: (doc id, raw score) pairs, scores non-increasing,
    ties broken by ascending doc id."""

    query: str
    ids: list[str]
    scores: np.ndarray

    def __len__(self):
        return len(self.ids)


@dataclass
class DenseIndex:
    ids: list[str]
    matrix: np.ndarray  # (n_docs, embed_dim)
    fingerprint: str
    staleness: int = 0
    # In-memory extras (not serialized): source documents and their feature
    # vectors, so episodes can re-score candidates and refresh is self-contained.
    documents: dict[str, Document] = field(default_factory=dict)
    features: list[FeatureVector] = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    def doc(self, doc_id: str) -> Document:
        return self.documents[doc_id]

    def feature(self, doc_id: str) -> FeatureVector:
        return self.features[self._pos[doc_id]]

    def __post_init__(self):
        self._pos = {d: i for i, d in enumerate(self.ids)}


def build(corpus: Corpus, params: EncoderParams) -> DenseIndex:
    """Embed every retrievable document with the given parameters."""
    docs = corpus.retrievable()
    if not docs:
        raise ValueError("corpus has no retrievable documents")
    features = [featurize(d.text, params.feature_dim) for d in docs]
    matrix = np.stack([encode(params, fv) for fv in features])
    return DenseIndex(
        ids=[d.id for d in docs],
        matrix=matrix,
        fingerprint=params.fingerprint(),
        documents={d.id: d for d in docs},
        features=features,
    )


def refresh(index: DenseIndex, params: EncoderParams) -> DenseIndex:
    """Re-embed all documents under current parameters; resets staleness.

    Only indexes built in-process carry document features; an index loaded
    from file must be rebuilt from its corpus instead.
    """
    if not index.features:
        raise ValueError("index has no stored features; rebuild from the corpus")
    matrix = np.stack([encode(params, fv) for fv in index.features])
    return DenseIndex(
        ids=list(index.ids),
        matrix=matrix,
        fingerprint=params.fingerprint(),
        documents=dict(index.documents),
        features=list(index.features),
    )


def retrieve(index: DenseIndex, query: str, params: EncoderParams, n: int) -> RankedCandidates:
    """Exact top-min(n, |index|) documents by inner product with the query.

    The query is encoded fresh with ``params``; document embeddings come from
    the (possibly stale) index matrix.
    """
    if len(index) == 0:
        raise ValueError("index is empty")
    if n < 1:
        raise ValueError("n must be >= 1")
    hq = encode(params, featurize(query, params.feature_dim))
    scores = index.matrix @ hq
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))[: min(n, len(index))]
    return RankedCandidates(
        query=query,
        ids=[index.ids[i] for i in order],
        scores=scores[order],
    )


def distribution(scores: np.ndarray, tau: float) -> np.ndarray:
    """softmax(scores / tau), computed with max subtraction for stability."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("scores must be non-empty")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = scores / tau
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def save_index(path: str, index: DenseIndex) -> None:
    """Write the queryable part of the index.

    Byte layout: 8-byte magic ``RRIDX1\\n\\0``, u32 header length, JSON header
    (doc count, embed dim, fingerprint), u32 id-table length, JSON id list,
    then the embedding matrix as row-major little-endian float64.
    """
    header = json.dumps(
        {"count": len(index), "embed_dim": index.matrix.shape[1], "fingerprint": index.fingerprint},
        sort_keys=True,
    ).encode("utf-8")
    id_table = json.dumps(index.ids).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_INDEX_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(id_table)))
        fh.write(id_table)
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f8").tobytes())


def load_index(path: str) -> DenseIndex:
    """Read an index file. The result supports retrieval but not refresh."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_INDEX_MAGIC))
        if magic != _INDEX_MAGIC:
            raise ValueError(f"{path}: not an index file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        (tlen,) = struct.unpack("<I", fh.read(4))
        ids = json.loads(fh.read(tlen).decode("utf-8"))
        count, dim = header["count"], header["embed_dim"]
        matrix = np.frombuffer(fh.read(count * dim * 8), dtype="<f8").reshape(count, dim).copy()
    return DenseIndex(ids=ids, matrix=matrix, fingerprint=header["fingerprint"])
