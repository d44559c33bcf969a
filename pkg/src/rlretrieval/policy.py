"""Episode runners for reward-driven retrieval policies.

Three training modes:

* ``d`` -- the claim itself is the query; documents are sampled from its
  candidate pool without replacement under an epsilon-greedy rule, each
  sample is scored by the oracle, and sampling stops once the accumulated
  label distribution puts the gold label on top (or a cap is hit).
* ``q`` -- the claim's intermediate questions each retrieve a top-1
  document; questions are ranked by how poorly their top-1 document scores
  (hardest first) and an epsilon-greedy pass selects k of them.
* ``d+q`` -- alternates the two: each selected question triggers a
  document-level sampling sequence over that question's pool, with separate
  epsilon controllers for the question and document levels.

Candidate sets come from the (possibly stale) index; the scores that define
sampling probabilities and gradient snapshots are always recomputed from
current encoder parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Claim, ClaimSet, Document
from .encoder import EncoderParams, FeatureVector, encode, featurize
from .index import DenseIndex, RankedCandidates, distribution, retrieve
from .oracle import OracleError, RewardOracle

logger = logging.getLogger(__name__)

MODES = ("d", "q", "d+q")


@dataclass
class PolicyConfig:
    k: int = 3                      # documents fed to the final prediction
    eps_doc: float = 0.1            # document-level exploration rate
    eps_q: float = 0.1              # question-level exploration rate
    pool_size: int = 20             # candidate pool size per query
    tau: float = 1.0                # softmax temperature of the retrieval distribution
    max_samples: int | None = None  # document sampling cap; defaults to 2*k
    final_reward_weight: float = 1.0
    mode: str = "d"

    def __post_init__(self):
        if self.max_samples is None:
            self.max_samples = 2 * self.k
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.k > self.pool_size:
            raise ValueError("k must not exceed pool_size")
        if self.max_samples > self.pool_size:
            raise ValueError("max_samples must not exceed pool_size")
        if not (0.0 <= self.eps_doc <= 1.0 and 0.0 <= self.eps_q <= 1.0):
            raise ValueError("epsilon values must lie in [0,1]")
        if self.tau <= 0.0:
            raise ValueError("tau must be positive")
        if self.final_reward_weight < 0.0:
            raise ValueError("final_reward_weight must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class StepRecord:
    """One (query, selected document) pair that enters the policy gradient."""

    level: str                      # "document" or "question"
    query: str
    query_features: FeatureVector
    candidate_ids: list[str]
    candidate_features: list[FeatureVector]
    fresh_scores: np.ndarray        # h(q).h(d) under the params used for sampling
    selected: int                   # position within candidate_ids
    doc_id: str
    branch: str                     # "explore" or "exploit"
    reward: float                   # intermediate reward for this pair
    distribution: np.ndarray        # oracle label distribution for this pair


@dataclass
class QuestionRecord:
    text: str
    top1_doc_id: str
    reward: float                   # oracle gold score of the top-1 document
    selection_order: int | None     # 0-based pick order, None if not selected


@dataclass
class Episode:
    claim_id: str
    mode: str
    steps: list[StepRecord]
    kappa: int                      # samples actually drawn before termination
    k: int                          # min(K, kappa): documents used for the final reward
    final_reward: float
    final_doc_ids: list[str]        # documents behind final_reward, in order
    questions: list[QuestionRecord] = field(default_factory=list)
    pseudo_question: bool = False   # claim text stood in for an empty question list


def epsilon_greedy_sample(
    candidates: RankedCandidates,
    probs: np.ndarray,
    k: int,
    eps: float,
    already: set[str],
    rng: np.random.Generator,
) -> tuple[str, str]:
    """Draw one document id: uniform over unsampled candidates with
    probability ``eps``, otherwise from the renormalized top-k slice (by
    probability, ties by ascending doc id) of the unsampled candidates."""
    avail = [i for i, did in enumerate(candidates.ids) if did not in already]
    if not avail:
        raise ValueError("all candidates exhausted")
    if rng.random() < eps:
        pick = avail[int(rng.integers(len(avail)))]
        return candidates.ids[pick], "explore"
    ranked = sorted(avail, key=lambda i: (-probs[i], candidates.ids[i]))
    top = ranked[:k]
    weights = np.array([probs[i] for i in top], dtype=np.float64)
    weights = weights / weights.sum()
    pick = top[int(rng.choice(len(top), p=weights))]
    return candidates.ids[pick], "exploit"


def _pool_snapshot(
    index: DenseIndex, query: str, params: EncoderParams, n: int, tau: float
) -> tuple[RankedCandidates, FeatureVector, list[FeatureVector], np.ndarray, np.ndarray]:
    """Retrieve a candidate pool and re-score it under current params."""
    pool = retrieve(index, query, params, n)
    query_fv = featurize(query, params.feature_dim)
    cand_fvs = [index.feature(did) for did in pool.ids]
    hq = encode(params, query_fv)
    fresh = np.array([hq @ encode(params, fv) for fv in cand_fvs], dtype=np.float64)
    probs = distribution(fresh, tau)
    return pool, query_fv, cand_fvs, fresh, probs


def _top1_position(pool: RankedCandidates, fresh: np.ndarray) -> int:
    return min(range(len(pool)), key=lambda i: (-fresh[i], pool.ids[i]))


def effective_questions(claim: Claim) -> tuple[list[str], bool]:
    """The claim's questions, or the claim text as a single pseudo-question."""
    if claim.questions:
        return list(claim.questions), False
    return [claim.text], True


def _document_sequence(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    rng: np.random.Generator,
    query: str,
    max_samples: int,
) -> list[StepRecord]:
    """Sample documents without replacement until the accumulated oracle
    distribution ranks the gold label first, or ``max_samples`` is reached."""
    pool, query_fv, cand_fvs, fresh, probs = _pool_snapshot(
        index, query, params, cfg.pool_size, cfg.tau
    )
    gold_idx = oracle.label_set.index(claim.gold)
    accumulated = np.zeros(len(oracle.label_set))
    already: set[str] = set()
    steps: list[StepRecord] = []
    for _ in range(min(max_samples, len(pool))):
        doc_id, branch = epsilon_greedy_sample(pool, probs, cfg.k, cfg.eps_doc, already, rng)
        already.add(doc_id)
        dist = oracle.score(claim, [index.doc(doc_id)])
        steps.append(
            StepRecord(
                level="document",
                query=query,
                query_features=query_fv,
                candidate_ids=pool.ids,
                candidate_features=cand_fvs,
                fresh_scores=fresh,
                selected=pool.ids.index(doc_id),
                doc_id=doc_id,
                branch=branch,
                reward=dist[claim.gold],
                distribution=dist.scores.copy(),
            )
        )
        accumulated += dist.scores
        if int(np.argmax(accumulated)) == gold_idx:
            break
    return steps


def run_document_episode(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    rng: np.random.Generator,
) -> Episode:
    """Document-level episode: query is the claim text; the final reward is
    scored over the first min(K, kappa) sampled documents in sampling order."""
    if cfg.mode != "d":
        raise ValueError(f"run_document_episode requires mode 'd', got {cfg.mode!r}")
    steps = _document_sequence(
        claim, index, params, oracle, cfg, rng, claim.text, cfg.max_samples
    )
    kappa = len(steps)
    k = min(cfg.k, kappa)
    final_doc_ids = [s.doc_id for s in steps[:k]]
    final_reward = oracle.reward(claim, [index.doc(d) for d in final_doc_ids])
    return Episode(
        claim_id=claim.id,
        mode="d",
        steps=steps,
        kappa=kappa,
        k=k,
        final_reward=final_reward,
        final_doc_ids=final_doc_ids,
    )


def _score_questions(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    questions: list[str],
):
    """For every question: pool snapshot, top-1 document, and its oracle reward."""
    snapshots = []
    for qtext in questions:
        pool, q_fv, cand_fvs, fresh, probs = _pool_snapshot(
            index, qtext, params, cfg.pool_size, cfg.tau
        )
        top1 = _top1_position(pool, fresh)
        dist = oracle.score(claim, [index.doc(pool.ids[top1])])
        snapshots.append(
            {
                "text": qtext,
                "pool": pool,
                "query_features": q_fv,
                "candidate_features": cand_fvs,
                "fresh": fresh,
                "probs": probs,
                "top1": top1,
                "reward": dist[claim.gold],
                "distribution": dist.scores.copy(),
            }
        )
    return snapshots


def _select_questions(
    snapshots: list[dict], k: int, eps_q: float, rng: np.random.Generator
) -> list[tuple[int, str]]:
    """Pick k questions sequentially: with probability eps_q uniform over the
    remaining ones, otherwise the remaining question with the lowest reward
    (hardest first; ties by original order)."""
    remaining = list(range(len(snapshots)))
    picks: list[tuple[int, str]] = []
    for _ in range(k):
        if rng.random() < eps_q:
            choice = remaining[int(rng.integers(len(remaining)))]
            branch = "explore"
        else:
            choice = min(remaining, key=lambda i: (snapshots[i]["reward"], i))
            branch = "exploit"
        remaining.remove(choice)
        picks.append((choice, branch))
    return picks


def _question_step(snap: dict, branch: str) -> StepRecord:
    pool = snap["pool"]
    return StepRecord(
        level="question",
        query=snap["text"],
        query_features=snap["query_features"],
        candidate_ids=pool.ids,
        candidate_features=snap["candidate_features"],
        fresh_scores=snap["fresh"],
        selected=snap["top1"],
        doc_id=pool.ids[snap["top1"]],
        branch=branch,
        reward=snap["reward"],
        distribution=snap["distribution"],
    )


def run_question_episode(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    rng: np.random.Generator,
) -> Episode:
    """Question-level episode: score every question's top-1 document, select
    k = min(K, |Q|) questions biased toward low rewards, and score the final
    prediction over the selected top-1 documents in selection order."""
    if cfg.mode != "q":
        raise ValueError(f"run_question_episode requires mode 'q', got {cfg.mode!r}")
    questions, pseudo = effective_questions(claim)
    if pseudo:
        logger.info("claim %s has no questions; using the claim as a pseudo-question", claim.id)
    snapshots = _score_questions(claim, index, params, oracle, cfg, questions)
    k = min(cfg.k, len(questions))
    picks = _select_questions(snapshots, k, cfg.eps_q, rng)

    steps = [_question_step(snapshots[i], branch) for i, branch in picks]
    qrecords = [
        QuestionRecord(
            text=snap["text"],
            top1_doc_id=snap["pool"].ids[snap["top1"]],
            reward=snap["reward"],
            selection_order=None,
        )
        for snap in snapshots
    ]
    for order, (i, _) in enumerate(picks):
        qrecords[i] = replace(qrecords[i], selection_order=order)

    final_doc_ids = [s.doc_id for s in steps]
    final_reward = oracle.reward(claim, [index.doc(d) for d in final_doc_ids])
    return Episode(
        claim_id=claim.id,
        mode="q",
        steps=steps,
        kappa=k,
        k=k,
        final_reward=final_reward,
        final_doc_ids=final_doc_ids,
        questions=qrecords,
        pseudo_question=pseudo,
    )


def run_hybrid_episode(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    rng: np.random.Generator,
) -> Episode:
    """Hybrid episode: the question controller picks the next question, then a
    document-level sampling sequence runs on that question's pool (capped at K
    samples, same termination rule); the final reward is scored over the
    selected questions' top-1 documents."""
    if cfg.mode != "d+q":
        raise ValueError(f"run_hybrid_episode requires mode 'd+q', got {cfg.mode!r}")
    questions, pseudo = effective_questions(claim)
    if pseudo:
        logger.info("claim %s has no questions; using the claim as a pseudo-question", claim.id)
    snapshots = _score_questions(claim, index, params, oracle, cfg, questions)
    k = min(cfg.k, len(questions))
    picks = _select_questions(snapshots, k, cfg.eps_q, rng)

    steps: list[StepRecord] = []
    for i, branch in picks:
        steps.append(_question_step(snapshots[i], branch))
        steps.extend(
            _document_sequence(
                claim, index, params, oracle, cfg, rng, snapshots[i]["text"], cfg.k
            )
        )

    qrecords = [
        QuestionRecord(
            text=snap["text"],
            top1_doc_id=snap["pool"].ids[snap["top1"]],
            reward=snap["reward"],
            selection_order=None,
        )
        for snap in snapshots
    ]
    for order, (i, _) in enumerate(picks):
        qrecords[i] = replace(qrecords[i], selection_order=order)

    final_doc_ids = [snapshots[i]["pool"].ids[snapshots[i]["top1"]] for i, _ in picks]
    final_reward = oracle.reward(claim, [index.doc(d) for d in final_doc_ids])
    return Episode(
        claim_id=claim.id,
        mode="d+q",
        steps=steps,
        kappa=k,
        k=k,
        final_reward=final_reward,
        final_doc_ids=final_doc_ids,
        questions=qrecords,
        pseudo_question=pseudo,
    )


def run_episode(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    cfg: PolicyConfig,
    rng: np.random.Generator,
) -> Episode:
    runner = {
        "d": run_document_episode,
        "q": run_question_episode,
        "d+q": run_hybrid_episode,
    }[cfg.mode]
    return runner(claim, index, params, oracle, cfg, rng)


def select_inference_docs(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    cfg: PolicyConfig,
) -> list[Document]:
    """Documents for the final prediction; oracle-free and deterministic.

    Mode ``d``: the top-K documents for the claim query. Modes ``q`` and
    ``d+q``: each question's top-1 document, questions ranked by that
    document's retrieval probability within its own pool, capped at K.
    Duplicate documents across questions are dropped, keeping first position.
    """
    if cfg.mode == "d":
        pool = retrieve(index, claim.text, params, cfg.k)
        return [index.doc(did) for did in pool.ids]

    questions, _ = effective_questions(claim)
    entries = []
    for qi, qtext in enumerate(questions):
        pool = retrieve(index, qtext, params, cfg.pool_size)
        probs = distribution(pool.scores, cfg.tau)
        entries.append((float(probs[0]), qi, pool.ids[0]))
    entries.sort(key=lambda e: (-e[0], e[1]))

    docs: list[Document] = []
    seen: set[str] = set()
    for _, _, doc_id in entries[: cfg.k]:
        if doc_id not in seen:
            seen.add(doc_id)
            docs.append(index.doc(doc_id))
    return docs


def fill_questions(claims: ClaimSet, oracle: RewardOracle) -> ClaimSet:
    """Populate missing question lists via the oracle's decomposition.

    Questions already present in the claims file win, so offline decomposition
    stays reproducible. Decomposition failures leave the list empty (episode
    runners then fall back to the claim-as-question rule).
    """
    filled = []
    for claim in claims.claims:
        if claim.questions:
            filled.append(claim)
            continue
        try:
            questions = tuple(oracle.decompose(claim))
        except OracleError as exc:
            logger.warning("decomposition failed for claim %s: %s", claim.id, exc)
            questions = ()
        filled.append(replace(claim, questions=questions))
    return ClaimSet(claims=tuple(filled), label_set=claims.label_set, split=claims.split)


def episode_trace_records(episode: Episode) -> list[dict]:
    """Line-delimited trace records for debugging and audit."""
    records = []
    for pos, step in enumerate(episode.steps):
        records.append(
            {
                "claim_id": episode.claim_id,
                "mode": episode.mode,
                "step": pos,
                "level": step.level,
                "query": step.query,
                "doc_id": step.doc_id,
                "branch": step.branch,
                "reward": step.reward,
            }
        )
    records.append(
        {
            "claim_id": episode.claim_id,
            "mode": episode.mode,
            "kappa": episode.kappa,
            "k": episode.k,
            "final_reward": episode.final_reward,
            "final_doc_ids": episode.final_doc_ids,
        }
    )
    return records
