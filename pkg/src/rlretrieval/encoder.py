"""Hashed text featurizer and trainable linear dual encoder.

Text is mapped to a sparse, L2-normalized bag of hashed word unigrams and
bigrams (sign hashing, ``HASH_VERSION`` pins the function). A single weight
matrix W (shape E x F, shared between query and document sides) embeds
feature vectors as ``h(x) = W @ x``; query-document affinity is the inner
product ``h(q) . h(d)``.

``log_policy_grad`` returns the exact analytic gradient of
``log softmax(h(q).h(d_j) / tau)`` at the selected candidate,
differentiating through both the query and all candidate embeddings.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from hashlib import blake2b

import numpy as np

DEFAULT_EMBED_DIM = 128
DEFAULT_FEATURE_DIM = 2 ** 18
HASH_VERSION = "blake2b8-v1"

_TOKEN_RE = re.compile(r"[a-z0-9]+")

_PARAMS_MAGIC = b"RRENC1\n\0"


@dataclass(frozen=True)
class FeatureVector:
    """Sparse unit vector: strictly increasing unique indices, float64 weights."""

    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return len(self.indices)


@dataclass
class EncoderParams:
    W: np.ndarray  # (embed_dim, feature_dim), float64 during training

    @property
    def embed_dim(self) -> int:
        return self.W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[1]

    def fingerprint(self) -> str:
        digest = blake2b(digest_size=16)
        digest.update(struct.pack("<II", self.embed_dim, self.feature_dim))
        digest.update(self.W.tobytes())
        return digest.hexdigest()


def init_params(
    embed_dim: int = DEFAULT_EMBED_DIM,
    feature_dim: int = DEFAULT_FEATURE_DIM,
    seed: int = 0,
) -> EncoderParams:
    """Gaussian init scaled so initial affinities track lexical overlap O(1)."""
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, feature_dim))
    return EncoderParams(W=W)


def _hash_term(term: str) -> int:
    return int.from_bytes(blake2b(term.encode("utf-8"), digest_size=8).digest(), "little")


def featurize(text: str, feature_dim: int = DEFAULT_FEATURE_DIM) -> FeatureVector:
    """Hash lowercased word unigrams and bigrams into ``feature_dim`` buckets.

    Deterministic across runs and platforms. Counts are sign-hashed and the
    result is L2-normalized; empty text yields the zero vector.
    """
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        return FeatureVector(np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64))
    terms = list(tokens)
    # Bigrams over distinct adjacent tokens; a token repeated next to itself
    # adds count, not a new term, so repetition cancels under normalization.
    terms.extend(f"{a} {b}" for a, b in zip(tokens, tokens[1:]) if a != b)

    weights: dict[int, float] = {}
    for term in terms:
        h = _hash_term(term)
        idx = h % feature_dim
        sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
        weights[idx] = weights.get(idx, 0.0) + sign

    indices = np.array(sorted(i for i, w in weights.items() if w != 0.0), dtype=np.int64)
    values = np.array([weights[i] for i in indices], dtype=np.float64)
    norm = np.linalg.norm(values)
    if norm > 0.0:
        values = values / norm
    return FeatureVector(indices=indices, values=values)


def encode(params: EncoderParams, x: FeatureVector) -> np.ndarray:
    """Embed a feature vector: ``W @ x``. Zero input gives the zero vector."""
    if x.nnz == 0:
        return np.zeros(params.embed_dim, dtype=np.float64)
    if int(x.indices.max()) >= params.feature_dim:
        raise ValueError(
            f"feature index {int(x.indices.max())} out of range for feature_dim {params.feature_dim}"
        )
    return params.W[:, x.indices] @ x.values


def scores_against(params: EncoderParams, query: FeatureVector, candidates: list[FeatureVector]) -> np.ndarray:
    """Inner products h(query) . h(d) for each candidate, under current params."""
    hq = encode(params, query)
    return np.array([hq @ encode(params, d) for d in candidates], dtype=np.float64)


def _add_outer(out: np.ndarray, vec: np.ndarray, sparse: FeatureVector, scale: float) -> None:
    # out[:, sparse.indices] += scale * outer(vec, sparse.values)
    # FeatureVector indices are unique, so fancy-index += is safe.
    if sparse.nnz == 0 or scale == 0.0:
        return
    out[:, sparse.indices] += scale * np.outer(vec, sparse.values)


def log_policy_grad(
    params: EncoderParams,
    query: FeatureVector,
    candidates: list[FeatureVector],
    selected: int,
    tau: float,
    out: np.ndarray | None = None,
    weight: float = 1.0,
) -> np.ndarray:
    """Exact gradient of ``log softmax_j(h(q).h(d_j)/tau)`` at ``selected``.

    With p = softmax(s/tau):
        d s_j / dW = h(d_j) q^T + h(q) d_j^T
        d log p_sel / dW = (1/tau) [ds_sel/dW - sum_j p_j ds_j/dW]

    ``weight`` scales the contribution; when ``out`` is given the scaled
    gradient is accumulated in place (used by the trainer to avoid
    materializing one dense matrix per sampled pair).
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    if not 0 <= selected < len(candidates):
        raise IndexError(f"selected index {selected} out of range")

    hq = encode(params, query)
    hds = [encode(params, d) for d in candidates]
    scores = np.array([hq @ hd for hd in hds])
    z = scores / tau
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()

    if out is None:
        out = np.zeros_like(params.W)

    scale = weight / tau
    # (h(d_sel) - sum_j p_j h(d_j)) q^T
    doc_mix = hds[selected] - sum(p * hd for p, hd in zip(probs, hds))
    _add_outer(out, doc_mix, query, scale)
    # h(q) (d_sel - sum_j p_j d_j)^T
    _add_outer(out, hq, candidates[selected], scale)
    for p, d in zip(probs, candidates):
        _add_outer(out, hq, d, -scale * p)
    return out


def log_policy_value(
    params: EncoderParams,
    query: FeatureVector,
    candidates: list[FeatureVector],
    selected: int,
    tau: float,
) -> float:
    """log softmax(h(q).h(d_j)/tau) at ``selected`` (used by gradient checks)."""
    scores = scores_against(params, query, candidates)
    z = scores / tau
    z -= z.max()
    return float(z[selected] - np.log(np.exp(z).sum()))


def save_params(path: str, params: EncoderParams, tau: float = 1.0, step: int = 0) -> None:
    """Write encoder weights.

    Byte layout: 8-byte magic ``RRENC1\\n\\0``, little-endian u32 header
    length, UTF-8 JSON header (sorted keys: embed_dim, feature_dim,
    hash_version, step, tau), then W as row-major little-endian float64.
    """
    header = json.dumps(
        {
            "embed_dim": params.embed_dim,
            "feature_dim": params.feature_dim,
            "hash_version": HASH_VERSION,
            "step": step,
            "tau": tau,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(params.W, dtype="<f8").tobytes())


def load_params(path: str) -> tuple[EncoderParams, dict]:
    """Read encoder weights; rejects files written with a different hash function."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_PARAMS_MAGIC))
        if magic != _PARAMS_MAGIC:
            raise ValueError(f"{path}: not an encoder params file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["hash_version"] != HASH_VERSION:
            raise ValueError(
                f"{path}: hash function mismatch "
                f"(file {header['hash_version']!r}, supported {HASH_VERSION!r})"
            )
        e, f = header["embed_dim"], header["feature_dim"]
        W = np.frombuffer(fh.read(e * f * 8), dtype="<f8").reshape(e, f).copy()
    return EncoderParams(W=W), header
