"""Reward oracles: label-score distributions and claim decomposition.

An oracle scores a label set given a claim and evidence documents; the
gold-label entry of that distribution is the training reward. Two
implementations share one interface:

* ``SimulatedOracle`` -- offline and deterministic. The gold-label weight is
  a logistic sharpening of the overlap between presented documents and a
  hidden per-claim evidence set; the remainder is spread uniformly over the
  other labels.
* ``RemoteOracle`` -- an HTTP endpoint exposing per-token log-scores
  (completion-style wire format). The prediction prompt asks for the next
  token after "can be classified as"; label-token log-scores are read from
  ``top_logprobs`` and normalized over the label set only.

Both cache by request content, count invocations vs. backend evaluations,
and are safe for concurrent calls.
"""

from __future__ import annotations

import json
import math
import os
import re
import threading
import time
from dataclasses import dataclass, field
from hashlib import blake2b
from importlib import resources

import numpy as np
import requests

from .data import Claim, Document

PREDICTION_PREAMBLE = "The following evidence is given: "
DECOMPOSITION_PREAMBLE = (
    "To verify the claim, a fact-checker will go through a step-by-step process "
    "to ask and answer a series of questions relevant to its factuality. "
    "Here are the specific questions raised:"
)
QUESTION_PREFIX = "Question:"
DEMO_DELIMITER = "\n---\n"

MISSING_LABEL_FLOOR = 1e-6


class OracleError(RuntimeError):
    """Oracle could not produce a score (transport failure, bad response, ...)."""


@dataclass(frozen=True)
class LabelScoreDistribution:
    labels: tuple[str, ...]
    scores: np.ndarray  # aligned with labels, in [0,1], sums to 1
    provenance: str

    def __post_init__(self):
        if len(self.labels) != len(self.scores):
            raise ValueError("labels and scores length mismatch")
        if abs(float(self.scores.sum()) - 1.0) > 1e-9:
            raise ValueError(f"scores sum to {self.scores.sum()}, expected 1")
        if (self.scores < 0).any() or (self.scores > 1).any():
            raise ValueError("scores must lie in [0,1]")

    def __getitem__(self, label: str) -> float:
        return float(self.scores[self.labels.index(label)])

    def argmax_label(self) -> str:
        """Highest-scoring label; exact ties go to the lowest label-set index."""
        return self.labels[int(np.argmax(self.scores))]


# ---------------------------------------------------------------------------
# Prompt templates


def load_demos(path: str | None, kind: str) -> list[str]:
    """Load demonstration blocks from a prompts file (blocks split by ``---``
    lines). ``path=None`` loads the packaged defaults for ``kind``
    ("prediction" or "decomposition")."""
    if path is None:
        name = f"{kind}_demos.txt"
        content = resources.files("rlretrieval.prompts").joinpath(name).read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            content = fh.read()
    blocks = [b.strip("\n") for b in content.split(DEMO_DELIMITER)]
    blocks = [b for b in blocks if b]
    if not blocks:
        raise ValueError("prompts file contains no demonstration blocks")
    return blocks


def render_prediction_prompt(
    claim_text: str,
    doc_texts: list[str],
    label_set: tuple[str, ...],
    demos: list[str],
) -> str:
    """Prediction prompt: demonstration blocks, then the query block ending
    with "can be classified as" for the endpoint to complete."""
    query = (
        f"{PREDICTION_PREAMBLE}{', '.join(doc_texts)}. "
        f"Among {', '.join(label_set)}, "
        f"the claim '''{claim_text}''' can be classified as"
    )
    return "\n\n".join([*demos, query])


def render_decomposition_prompt(claim_text: str, demos: list[str]) -> str:
    """Decomposition prompt: demonstration blocks, then the target claim block
    ending with the question preamble; the endpoint continues with
    "Question: ..." lines, choosing the count itself."""
    query = f"Claim: {claim_text}\n{DECOMPOSITION_PREAMBLE}\n"
    return "\n\n".join([*demos, query])


def parse_questions(text: str) -> list[str]:
    """Extract "Question:"-prefixed lines in order, dropping exact duplicates."""
    questions = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith(QUESTION_PREFIX):
            q = line[len(QUESTION_PREFIX):].strip()
            if q and q not in questions:
                questions.append(q)
    return questions


# ---------------------------------------------------------------------------
# Shared oracle machinery


class RewardOracle:
    """Base class: validation, content-keyed memoization, call counters."""

    provenance = "unknown"

    def __init__(self, label_set: tuple[str, ...], cache: bool = True):
        if not label_set:
            raise ValueError("label_set must be non-empty")
        self.label_set = tuple(label_set)
        self.cache_enabled = cache
        self._memo: dict[str, LabelScoreDistribution] = {}
        self._lock = threading.Lock()
        self.calls = 0
        self.backend_calls = 0

    def score(self, claim: Claim, docs: list[Document]) -> LabelScoreDistribution:
        """Normalized distribution over the label set for (claim, docs)."""
        if not docs:
            raise ValueError("docs must be non-empty")
        key = self._key(claim, docs)
        with self._lock:
            self.calls += 1
            if self.cache_enabled and key in self._memo:
                return self._memo[key]
        dist = self._score(claim, docs)
        with self._lock:
            self.backend_calls += 1
            if self.cache_enabled:
                self._memo[key] = dist
        return dist

    def reward(self, claim: Claim, docs: list[Document]) -> float:
        """Gold-label entry of the score distribution, in [0,1]."""
        return self.score(claim, docs)[claim.gold]

    def decompose(self, claim: Claim) -> list[str]:
        raise NotImplementedError

    def _key(self, claim: Claim, docs: list[Document]) -> str:
        raise NotImplementedError

    def _score(self, claim: Claim, docs: list[Document]) -> LabelScoreDistribution:
        raise NotImplementedError


def _logistic(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


# ---------------------------------------------------------------------------
# Simulated oracle


@dataclass
class SimulatedOracleSpec:
    """Hidden ground truth driving the simulated oracle.

    ``evidence`` maps claim id -> ids of its hidden evidence documents;
    ``gold`` maps claim id -> gold label. ``beta`` sharpens the logistic that
    converts evidence overlap into gold-label weight.
    """

    evidence: dict[str, frozenset[str]]
    gold: dict[str, str]
    beta: float = 4.0

    def __post_init__(self):
        self.evidence = {cid: frozenset(ids) for cid, ids in self.evidence.items()}
        for cid, ids in self.evidence.items():
            if not ids:
                raise ValueError(f"claim {cid!r} has an empty hidden evidence set")
            if cid not in self.gold:
                raise ValueError(f"claim {cid!r} has evidence but no gold label")

    def save(self, path: str) -> None:
        payload = {
            "beta": self.beta,
            "gold": self.gold,
            "evidence": {cid: sorted(ids) for cid, ids in self.evidence.items()},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, ensure_ascii=False, indent=0, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "SimulatedOracleSpec":
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls(
            evidence={cid: frozenset(ids) for cid, ids in payload["evidence"].items()},
            gold=dict(payload["gold"]),
            beta=float(payload.get("beta", 4.0)),
        )


class SimulatedOracle(RewardOracle):
    """Deterministic offline oracle for tests and the synthetic benchmark.

    Gold-label weight: sigmoid(beta * (2 * overlap - 1)) where overlap is the
    fraction of the claim's hidden evidence present in ``docs``; the remainder
    is split uniformly over the other labels. Monotone in overlap.
    """

    provenance = "simulated"

    def __init__(self, spec: SimulatedOracleSpec, label_set: tuple[str, ...], cache: bool = True):
        super().__init__(label_set, cache=cache)
        self.spec = spec

    def _key(self, claim: Claim, docs: list[Document]) -> str:
        return claim.id + "\x00" + "\x00".join(d.id for d in docs)

    def _score(self, claim: Claim, docs: list[Document]) -> LabelScoreDistribution:
        try:
            hidden = self.spec.evidence[claim.id]
            gold = self.spec.gold[claim.id]
        except KeyError as exc:
            raise OracleError(f"claim {claim.id!r} unknown to the simulated oracle") from exc
        overlap = len({d.id for d in docs} & hidden) / len(hidden)
        g = _logistic(self.spec.beta * (2.0 * overlap - 1.0))
        n = len(self.label_set)
        if n == 1:
            scores = np.array([1.0])
        else:
            scores = np.full(n, (1.0 - g) / (n - 1))
            scores[self.label_set.index(gold)] = g
        return LabelScoreDistribution(self.label_set, scores, self.provenance)

    def decompose(self, claim: Claim) -> list[str]:
        """Three fixed template questions; stable across runs."""
        base = claim.text.strip().rstrip(".")
        questions = [
            f"Is it true that {base}?",
            f"What evidence supports or contradicts the claim that {base}?",
            f"Who are the sources reporting that {base}?",
        ]
        return list(dict.fromkeys(questions))


# ---------------------------------------------------------------------------
# Remote oracle


@dataclass
class RemoteOracleSpec:
    """Connection and scoring policy for an HTTP per-token-score endpoint."""

    endpoint: str
    model: str
    token_env: str = "RLRETRIEVAL_ORACLE_TOKEN"
    label_tokens: dict[str, str] = field(default_factory=dict)
    timeout: float = 30.0
    max_inflight: int = 4
    retries: int = 2
    backoff: float = 0.5
    top_logprobs: int = 20
    max_prompt_chars: int = 16000
    max_decompose_tokens: int = 256
    shots: int = 2
    disk_cache_dir: str | None = None
    prediction_demos_path: str | None = None
    decomposition_demos_path: str | None = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")

    def resolve_label_tokens(self, label_set: tuple[str, ...]) -> dict[str, str]:
        """One scoring token per label (default: the label's first word token).

        Multi-token labels are scored by their first token, so the mapping
        must be collision-free.
        """
        mapping = {}
        for label in label_set:
            if label in self.label_tokens:
                mapping[label] = self.label_tokens[label]
            else:
                m = re.findall(r"[A-Za-z0-9]+", label)
                if not m:
                    raise ValueError(f"cannot derive a scoring token for label {label!r}")
                mapping[label] = m[0]
        normalized = [t.strip().lower() for t in mapping.values()]
        if len(set(normalized)) != len(normalized):
            raise ValueError(f"label token mapping has collisions: {mapping}")
        return mapping


class RemoteOracle(RewardOracle):
    """Client for a completion-style endpoint returning per-token log-scores.

    Wire format: POST JSON ``{"model", "prompt", "temperature": 0,
    "max_tokens", "logprobs"}``; the response carries
    ``choices[0].logprobs.top_logprobs[0]`` as a token -> logprob object for
    scoring, and ``choices[0].text`` for decomposition. Auth is a bearer
    token read from the configured environment variable.
    """

    provenance = "remote"

    def __init__(self, spec: RemoteOracleSpec, label_set: tuple[str, ...], cache: bool = True):
        super().__init__(label_set, cache=cache)
        self.spec = spec
        self.label_tokens = spec.resolve_label_tokens(self.label_set)
        self._inflight = threading.Semaphore(spec.max_inflight)
        self._disk_lock = threading.Lock()
        self.http_requests = 0
        self._response_memo: dict[str, dict] = {}
        self.prediction_demos = load_demos(spec.prediction_demos_path, "prediction")[: spec.shots]
        self.decomposition_demos = load_demos(spec.decomposition_demos_path, "decomposition")[: spec.shots]

    # -- prompt assembly

    def prediction_prompt(self, claim: Claim, docs: list[Document]) -> str:
        prompt = render_prediction_prompt(
            claim.text, [d.text for d in docs], self.label_set, self.prediction_demos
        )
        if len(prompt) > self.spec.max_prompt_chars:
            # Find the first document that pushes the prompt over budget.
            for i in range(len(docs)):
                partial = render_prediction_prompt(
                    claim.text, [d.text for d in docs[: i + 1]], self.label_set, self.prediction_demos
                )
                if len(partial) > self.spec.max_prompt_chars:
                    raise OracleError(
                        f"prompt exceeds {self.spec.max_prompt_chars} chars at document {docs[i].id!r}"
                    )
            raise OracleError(f"prompt exceeds {self.spec.max_prompt_chars} chars")
        return prompt

    # -- transport with retries, in-flight bound, and content-addressed cache

    def _request(self, payload: dict) -> dict:
        body = json.dumps(payload, sort_keys=True, ensure_ascii=False)
        key = blake2b(body.encode("utf-8"), digest_size=16).hexdigest()
        with self._lock:
            if key in self._response_memo:
                return self._response_memo[key]
        cached = self._disk_get(key)
        if cached is not None:
            with self._lock:
                self._response_memo[key] = cached
            return cached

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.spec.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"

        last_error: Exception | None = None
        for attempt in range(self.spec.retries + 1):
            try:
                with self._inflight:
                    with self._lock:
                        self.http_requests += 1
                    resp = requests.post(
                        self.spec.endpoint, data=body.encode("utf-8"),
                        headers=headers, timeout=self.spec.timeout,
                    )
                resp.raise_for_status()
                result = resp.json()
                with self._lock:
                    self._response_memo[key] = result
                self._disk_put(key, result)
                return result
            except (requests.RequestException, ValueError) as exc:
                last_error = exc
                if attempt < self.spec.retries:
                    time.sleep(self.spec.backoff * (2 ** attempt))
        raise OracleError(
            f"oracle request failed after {self.spec.retries + 1} attempts: {last_error}"
        ) from last_error

    def _disk_get(self, key: str) -> dict | None:
        if not self.spec.disk_cache_dir:
            return None
        path = os.path.join(self.spec.disk_cache_dir, key + ".json")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def _disk_put(self, key: str, value: dict) -> None:
        if not self.spec.disk_cache_dir:
            return
        with self._disk_lock:
            os.makedirs(self.spec.disk_cache_dir, exist_ok=True)
            path = os.path.join(self.spec.disk_cache_dir, key + ".json")
            tmp = path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(value, fh, ensure_ascii=False)
            os.replace(tmp, path)

    # -- scoring

    def _key(self, claim: Claim, docs: list[Document]) -> str:
        return self.prediction_prompt(claim, docs) + "\x00" + self.spec.model

    def _score(self, claim: Claim, docs: list[Document]) -> LabelScoreDistribution:
        prompt = self.prediction_prompt(claim, docs)
        response = self._request(
            {
                "model": self.spec.model,
                "prompt": prompt,
                "temperature": 0,
                "max_tokens": 1,
                "logprobs": self.spec.top_logprobs,
            }
        )
        try:
            top = response["choices"][0]["logprobs"]["top_logprobs"][0]
        except (KeyError, IndexError, TypeError) as exc:
            raise OracleError(f"malformed oracle response: {exc}") from exc

        by_token: dict[str, float] = {}
        for token, logprob in top.items():
            norm = token.strip().lower()
            if norm and (norm not in by_token or logprob > by_token[norm]):
                by_token[norm] = float(logprob)

        # Probability-scale scores; labels absent from top-k get a floor.
        raw = np.empty(len(self.label_set))
        for i, label in enumerate(self.label_set):
            token = self.label_tokens[label].strip().lower()
            raw[i] = math.exp(by_token[token]) if token in by_token else MISSING_LABEL_FLOOR
        scores = raw / raw.sum()
        return LabelScoreDistribution(self.label_set, scores, self.provenance)

    def decompose(self, claim: Claim) -> list[str]:
        if not claim.text:
            raise ValueError("claim text is empty")
        prompt = render_decomposition_prompt(claim.text, self.decomposition_demos)
        response = self._request(
            {
                "model": self.spec.model,
                "prompt": prompt,
                "temperature": 0,
                "max_tokens": self.spec.max_decompose_tokens,
            }
        )
        try:
            text = response["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as exc:
            raise OracleError(f"malformed oracle response: {exc}") from exc
        questions = parse_questions(text)
        if not questions:
            raise OracleError(f"no parseable questions for claim {claim.id!r}")
        return questions
