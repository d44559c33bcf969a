"""Policy-gradient and KLD training of the retrieval encoder.

The REINFORCE update ascends the mean of reward-weighted gradients of
log-policy over all (query, sampled document) pairs in a batch of episodes.
The KLD baseline instead minimizes KL(P_R || Q) between the retrieval
distribution over a fixed top-K support and the oracle-rated distribution
over the same support (Q is treated as constant).

Determinism contract: all randomness is derived from (seed, epoch, claim id),
the index is refreshed at every epoch boundary, and checkpoints capture
enough state that resuming at an epoch boundary reproduces an uninterrupted
run bit-exactly when the oracle is deterministic.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from hashlib import blake2b

import numpy as np

from .data import ClaimSet, Corpus
from .encoder import (
    HASH_VERSION,
    EncoderParams,
    encode,
    featurize,
    init_params,
    log_policy_grad,
    log_policy_value,
)
from .index import DenseIndex, build, distribution, refresh, retrieve
from .oracle import OracleError, RewardOracle
from .policy import (
    Episode,
    PolicyConfig,
    effective_questions,
    episode_trace_records,
    run_episode,
)

logger = logging.getLogger(__name__)

_CKPT_MAGIC = b"RRCKPT1\0"

ALGORITHMS = ("ffrr", "replug")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 4
    warmup_ratio: float = 0.1
    epochs: int = 1
    refresh_every: int = 50         # index refresh period, in parameter updates
    baseline: bool = False          # subtract an EMA baseline from returns
    seed: int = 0
    algorithm: str = "ffrr"
    embed_dim: int = 128
    feature_dim: int = 2 ** 18
    reward_temperature: float = 1.0  # beta applied to log-rewards in the rated distribution

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0,1]")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "AdamState":
        return cls(m=np.zeros_like(params.W), v=np.zeros_like(params.W))


def adam_apply(params: EncoderParams, adam: AdamState, grad: np.ndarray, lr: float) -> None:
    """One in-place Adam minimization step with bias correction."""
    adam.step += 1
    adam.m = adam.beta1 * adam.m + (1.0 - adam.beta1) * grad
    adam.v = adam.beta2 * adam.v + (1.0 - adam.beta2) * grad * grad
    m_hat = adam.m / (1.0 - adam.beta1 ** adam.step)
    v_hat = adam.v / (1.0 - adam.beta2 ** adam.step)
    params.W -= lr * m_hat / (np.sqrt(v_hat) + adam.eps)


def warmup_lr(base: float, step: int, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup: at 1-based update ``step`` below warmup_ratio*total_steps
    the effective rate is base*step/(warmup_ratio*total_steps)."""
    warm = warmup_ratio * total_steps
    if warm > 0 and step < warm:
        return base * step / warm
    return base


def episode_return(episode: Episode, step: int, lam: float) -> float:
    """Return R(q,d) for one step: its intermediate reward, plus lam times the
    final reward when the step's document is among those used for the final
    prediction."""
    record = episode.steps[step]
    value = record.reward
    if lam != 0.0 and record.doc_id in episode.final_doc_ids:
        value += lam * episode.final_reward
    return value


def reinforce_update(
    episodes: list[Episode],
    params: EncoderParams,
    adam: AdamState,
    train_cfg: TrainConfig,
    policy_cfg: PolicyConfig,
    total_steps: int,
    baseline_value: float = 0.0,
) -> tuple[float, float]:
    """Apply one Adam step in the REINFORCE ascent direction.

    Returns (new baseline EMA, surrogate loss -mean(log pi * R)). Raises on a
    non-finite gradient, naming the offending episode.
    """
    if not episodes:
        raise ValueError("batch must be non-empty")
    lam = policy_cfg.final_reward_weight
    grad = np.zeros_like(params.W)
    raw_returns: list[float] = []
    surrogate = 0.0
    n_pairs = 0
    for ep in episodes:
        for idx in range(len(ep.steps)):
            ret = episode_return(ep, idx, lam)
            raw_returns.append(ret)
            weight = ret - baseline_value if train_cfg.baseline else ret
            step = ep.steps[idx]
            log_policy_grad(
                params,
                step.query_features,
                step.candidate_features,
                step.selected,
                policy_cfg.tau,
                out=grad,
                weight=weight,
            )
            surrogate -= weight * log_policy_value(
                params, step.query_features, step.candidate_features, step.selected, policy_cfg.tau
            )
            n_pairs += 1
        if not np.isfinite(grad).all():
            raise RuntimeError(f"non-finite gradient after episode for claim {ep.claim_id!r}")
    grad /= n_pairs
    surrogate /= n_pairs

    lr = warmup_lr(train_cfg.learning_rate, adam.step + 1, total_steps, train_cfg.warmup_ratio)
    adam_apply(params, adam, -grad, lr)

    new_baseline = baseline_value
    if train_cfg.baseline:
        new_baseline = 0.99 * baseline_value + 0.01 * float(np.mean(raw_returns))
    return new_baseline, surrogate


def _rated_distribution(rewards: np.ndarray, beta: float) -> np.ndarray:
    """Oracle-rated distribution over a support: softmax of log-rewards at
    temperature beta, i.e. proportional to rewards**(1/beta)."""
    clipped = np.clip(np.asarray(rewards, dtype=np.float64), 1e-12, None)
    return distribution(np.log(clipped), beta)


def _kl_terms(
    params: EncoderParams,
    queries,  # list of FeatureVector, one per support entry
    docs,     # list of FeatureVector, one per support entry
    rewards: np.ndarray,
    tau: float,
    beta: float,
    grad: np.ndarray,
) -> float:
    """Accumulate the exact gradient of KL(P_R || Q) into ``grad``; returns KL.

    P_R = softmax(s/tau) with s_i = h(q_i).h(d_i); Q is the rated distribution
    (constant). dKL/ds_i = (1/tau) P_i ((log P_i - log Q_i) - KL).
    """
    hqs = [encode(params, q) for q in queries]
    hds = [encode(params, d) for d in docs]
    scores = np.array([hq @ hd for hq, hd in zip(hqs, hds)])
    p = distribution(scores, tau)
    q = _rated_distribution(rewards, beta)
    log_ratio = np.log(p) - np.log(q)
    kl = float(np.sum(p * log_ratio))
    coeff = p * (log_ratio - kl) / tau
    for c, hq, hd, qfv, dfv in zip(coeff, hqs, hds, queries, docs):
        if c == 0.0:
            continue
        grad[:, qfv.indices] += c * np.outer(hd, qfv.values)
        grad[:, dfv.indices] += c * np.outer(hq, dfv.values)
    return kl


def replug_update(
    claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    adam: AdamState,
    train_cfg: TrainConfig,
    policy_cfg: PolicyConfig,
    total_steps: int,
) -> float | None:
    """One KLD minimization step for a single claim; returns the KL value, or
    None when the oracle failed and the claim was skipped."""
    tau = policy_cfg.tau
    beta = train_cfg.reward_temperature
    grad = np.zeros_like(params.W)
    kl_total = 0.0
    try:
        if policy_cfg.mode in ("d",):
            supports = [_claim_support(claim, index, params, policy_cfg)]
        elif policy_cfg.mode == "q":
            supports = [_question_support(claim, index, params, policy_cfg)]
        else:
            supports = _hybrid_supports(claim, index, params, policy_cfg)
        for queries, docs, rewards in _with_rewards(supports, claim, index, oracle):
            kl_total += _kl_terms(params, queries, docs, rewards, tau, beta, grad)
    except OracleError as exc:
        logger.warning("skipping claim %s: %s", claim.id, exc)
        return None

    if not np.isfinite(grad).all():
        raise RuntimeError(f"non-finite KL gradient for claim {claim.id!r}")
    lr = warmup_lr(train_cfg.learning_rate, adam.step + 1, total_steps, train_cfg.warmup_ratio)
    adam_apply(params, adam, grad, lr)
    return kl_total


def _claim_support(claim, index, params, policy_cfg):
    """Top-K documents for the claim query; the query repeats per entry."""
    pool = retrieve(index, claim.text, params, policy_cfg.k)
    qfv = featurize(claim.text, params.feature_dim)
    return [(qfv, index.feature(did), did) for did in pool.ids]


def _question_support(claim, index, params, policy_cfg):
    """Top-1 document of each of the first K questions."""
    questions, _ = effective_questions(claim)
    entries = []
    for qtext in questions[: policy_cfg.k]:
        pool = retrieve(index, qtext, params, policy_cfg.pool_size)
        qfv = featurize(qtext, params.feature_dim)
        hq = encode(params, qfv)
        fresh = np.array([hq @ encode(params, index.feature(d)) for d in pool.ids])
        top1 = min(range(len(pool)), key=lambda i: (-fresh[i], pool.ids[i]))
        entries.append((qfv, index.feature(pool.ids[top1]), pool.ids[top1]))
    return entries


def _hybrid_supports(claim, index, params, policy_cfg):
    """Per-question top-K supports plus the question-level top-1 support."""
    questions, _ = effective_questions(claim)
    supports = []
    for qtext in questions[: policy_cfg.k]:
        pool = retrieve(index, qtext, params, policy_cfg.k)
        qfv = featurize(qtext, params.feature_dim)
        supports.append([(qfv, index.feature(did), did) for did in pool.ids])
    supports.append(_question_support(claim, index, params, policy_cfg))
    return supports


def _with_rewards(supports, claim, index, oracle):
    for entries in supports:
        queries = [e[0] for e in entries]
        docs = [e[1] for e in entries]
        rewards = np.array([oracle.reward(claim, [index.doc(e[2])]) for e in entries])
        yield queries, docs, rewards


# ---------------------------------------------------------------------------
# Checkpoints


@dataclass
class Checkpoint:
    params: EncoderParams
    adam: AdamState
    train_cfg: TrainConfig
    policy_cfg: PolicyConfig
    epoch: int = 0            # completed epochs
    update: int = 0           # applied parameter updates
    total_updates: int = 0    # planned updates (fixes the warmup schedule)
    baseline: float = 0.0     # EMA of returns (used when baseline is toggled)

    def fingerprint(self) -> str:
        return self.params.fingerprint()


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    """Write a resumable checkpoint.

    Byte layout: 8-byte magic ``RRCKPT1\\0``, u32 header length, JSON header
    (sorted keys; configs, counters, Adam hyperparameters, hash version),
    then W, Adam m, Adam v as row-major little-endian float64. Writing the
    same state twice produces identical bytes.
    """
    header = json.dumps(
        {
            "hash_version": HASH_VERSION,
            "embed_dim": ckpt.params.embed_dim,
            "feature_dim": ckpt.params.feature_dim,
            "adam_step": ckpt.adam.step,
            "beta1": ckpt.adam.beta1,
            "beta2": ckpt.adam.beta2,
            "eps_adam": ckpt.adam.eps,
            "epoch": ckpt.epoch,
            "update": ckpt.update,
            "total_updates": ckpt.total_updates,
            "baseline": ckpt.baseline,
            "train_cfg": asdict(ckpt.train_cfg),
            "policy_cfg": asdict(ckpt.policy_cfg),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for arr in (ckpt.params.W, ckpt.adam.m, ckpt.adam.v):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header["hash_version"] != HASH_VERSION:
            raise ValueError(
                f"{path}: hash function mismatch "
                f"(file {header['hash_version']!r}, supported {HASH_VERSION!r})"
            )
        e, f = header["embed_dim"], header["feature_dim"]
        arrays = []
        for _ in range(3):
            arrays.append(np.frombuffer(fh.read(e * f * 8), dtype="<f8").reshape(e, f).copy())
    params = EncoderParams(W=arrays[0])
    adam = AdamState(
        m=arrays[1],
        v=arrays[2],
        step=header["adam_step"],
        beta1=header["beta1"],
        beta2=header["beta2"],
        eps=header["eps_adam"],
    )
    return Checkpoint(
        params=params,
        adam=adam,
        train_cfg=TrainConfig(**header["train_cfg"]),
        policy_cfg=PolicyConfig(**header["policy_cfg"]),
        epoch=header["epoch"],
        update=header["update"],
        total_updates=header["total_updates"],
        baseline=header["baseline"],
    )


# ---------------------------------------------------------------------------
# Training loop


def derive_rng(seed: int, *context) -> np.random.Generator:
    """Deterministic generator derived from the master seed and a context key
    (epoch, claim id, ...); independent of consumption order elsewhere."""
    digest = blake2b(repr((seed, *context)).encode("utf-8"), digest_size=16).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


class OracleOutage(RuntimeError):
    """Raised when the oracle keeps failing; training already checkpointed."""


def train(
    claims: ClaimSet,
    corpus: Corpus,
    oracle: RewardOracle,
    policy_cfg: PolicyConfig,
    train_cfg: TrainConfig,
    checkpoint_path: str | None = None,
    log_fn=None,
    trace_fn=None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Run the full training loop and return the final checkpoint.

    Epochs iterate over shuffled claims in batches; FFRR applies one update
    per batch, the KLD baseline one update per claim. The index is refreshed
    every ``refresh_every`` updates and at every epoch boundary (which is what
    makes epoch-boundary resumes bit-exact). When ``checkpoint_path`` is set,
    the checkpoint is rewritten after every epoch.
    """
    if len(claims) == 0:
        raise ValueError("training split is empty")
    n = len(claims)
    batches_per_epoch = math.ceil(n / train_cfg.batch_size)
    updates_per_epoch = n if train_cfg.algorithm == "replug" else batches_per_epoch
    total_updates = train_cfg.epochs * updates_per_epoch

    if resume is not None:
        ckpt = resume
        params, adam = ckpt.params, ckpt.adam
        policy_cfg, train_cfg = ckpt.policy_cfg, ckpt.train_cfg
        total_updates = ckpt.total_updates
        start_epoch = ckpt.epoch
        update = ckpt.update
        baseline = ckpt.baseline
    else:
        params = init_params(train_cfg.embed_dim, train_cfg.feature_dim, seed=train_cfg.seed)
        adam = AdamState.zeros_like(params)
        start_epoch = 0
        update = 0
        baseline = 0.0
        ckpt = Checkpoint(
            params=params,
            adam=adam,
            train_cfg=train_cfg,
            policy_cfg=policy_cfg,
            total_updates=total_updates,
        )

    index = build(corpus, params)
    since_refresh = 0
    consecutive_failures = 0
    failure_threshold = max(8, 2 * train_cfg.batch_size)

    claim_list = list(claims.claims)
    for epoch in range(start_epoch, train_cfg.epochs):
        order = derive_rng(train_cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, train_cfg.batch_size):
            batch = [claim_list[i] for i in order[start:start + train_cfg.batch_size]]

            if train_cfg.algorithm == "replug":
                for claim in batch:
                    kl = replug_update(
                        claim, index, params, oracle, adam,
                        train_cfg, policy_cfg, total_updates,
                    )
                    if kl is None:
                        consecutive_failures += 1
                        _check_outage(consecutive_failures, failure_threshold, ckpt, checkpoint_path)
                        continue
                    consecutive_failures = 0
                    update += 1
                    since_refresh += 1
                    if log_fn:
                        log_fn({
                            "update": update, "epoch": epoch,
                            "lr": warmup_lr(train_cfg.learning_rate, adam.step, total_updates,
                                            train_cfg.warmup_ratio),
                            "kl": kl, "algorithm": "replug",
                        })
                    if since_refresh >= train_cfg.refresh_every:
                        index = refresh(index, params)
                        since_refresh = 0
            else:
                episodes = []
                for claim in batch:
                    rng = derive_rng(train_cfg.seed, "episode", epoch, claim.id)
                    try:
                        episode = run_episode(claim, index, params, oracle, policy_cfg, rng)
                        episodes.append(episode)
                        consecutive_failures = 0
                        if trace_fn:
                            for record in episode_trace_records(episode):
                                trace_fn({"epoch": epoch, **record})
                    except OracleError as exc:
                        consecutive_failures += 1
                        logger.warning("discarding episode for claim %s: %s", claim.id, exc)
                        _check_outage(consecutive_failures, failure_threshold, ckpt, checkpoint_path)
                if not episodes:
                    continue
                baseline, surrogate = reinforce_update(
                    episodes, params, adam, train_cfg, policy_cfg, total_updates, baseline
                )
                update += 1
                since_refresh += 1
                if log_fn:
                    lam = policy_cfg.final_reward_weight
                    returns = [
                        episode_return(ep, i, lam)
                        for ep in episodes for i in range(len(ep.steps))
                    ]
                    log_fn({
                        "update": update, "epoch": epoch,
                        "lr": warmup_lr(train_cfg.learning_rate, adam.step, total_updates,
                                        train_cfg.warmup_ratio),
                        "mean_return": float(np.mean(returns)),
                        "mean_kappa": float(np.mean([ep.kappa for ep in episodes])),
                        "surrogate": surrogate, "algorithm": "ffrr",
                    })
                if since_refresh >= train_cfg.refresh_every:
                    index = refresh(index, params)
                    since_refresh = 0

        index = refresh(index, params)
        since_refresh = 0
        ckpt = Checkpoint(
            params=params, adam=adam, train_cfg=train_cfg, policy_cfg=policy_cfg,
            epoch=epoch + 1, update=update, total_updates=total_updates, baseline=baseline,
        )
        if checkpoint_path:
            save_checkpoint(checkpoint_path, ckpt)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt


def _check_outage(failures: int, threshold: int, ckpt: Checkpoint, checkpoint_path: str | None):
    if failures >= threshold:
        if checkpoint_path:
            save_checkpoint(checkpoint_path, ckpt)
        raise OracleOutage(f"oracle failed {failures} consecutive times; checkpoint saved")
