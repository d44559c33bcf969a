"""Finite-difference verification of the analytic gradients.

Randomized small instances compare the shipped gradients of log-policy and
of the KLD objective against central differences computed from independent,
plain-numpy value functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, FeatureVector, log_policy_grad
from .trainer import _kl_terms, _rated_distribution

FD_STEP = 1e-6


def _random_feature(rng: np.random.Generator, feature_dim: int) -> FeatureVector:
    nnz = int(rng.integers(1, min(6, feature_dim) + 1))
    indices = np.sort(rng.choice(feature_dim, size=nnz, replace=False)).astype(np.int64)
    values = rng.normal(size=nnz)
    values /= np.linalg.norm(values)
    return FeatureVector(indices=indices, values=values)


def _dense(fv: FeatureVector, feature_dim: int) -> np.ndarray:
    x = np.zeros(feature_dim)
    x[fv.indices] = fv.values
    return x


def _log_policy_value_dense(W, query, cands, selected, tau) -> float:
    # Independent of the encoder module: plain dense linear algebra.
    hq = W @ query
    scores = np.array([hq @ (W @ d) for d in cands])
    z = scores / tau
    z -= z.max()
    return float(z[selected] - np.log(np.exp(z).sum()))


def _kl_value_dense(W, queries, docs, q_dist, tau) -> float:
    scores = np.array([(W @ q) @ (W @ d) for q, d in zip(queries, docs)])
    z = scores / tau
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return float(np.sum(p * (np.log(p) - np.log(q_dist))))


def _central_diff(W: np.ndarray, value_fn, step: float = FD_STEP) -> np.ndarray:
    grad = np.zeros_like(W)
    it = np.nditer(W, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = W[idx]
        W[idx] = orig + step
        f_plus = value_fn()
        W[idx] = orig - step
        f_minus = value_fn()
        W[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
        it.iternext()
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-3)
    return float(np.abs(analytic - numeric).max()) / scale


@dataclass
class GradCheckResult:
    instances: int
    max_error_log_policy: float
    max_error_kl: float
    threshold: float
    seed: int

    @property
    def passed(self) -> bool:
        return (
            self.max_error_log_policy < self.threshold
            and self.max_error_kl < self.threshold
        )


def check_log_policy(rng: np.random.Generator, corrupt: bool = False) -> float:
    embed_dim = int(rng.integers(2, 9))
    feature_dim = int(rng.integers(8, 33))
    n_cands = int(rng.integers(1, 6))
    tau = float(rng.choice([0.5, 1.0, 2.0]))
    W = rng.normal(size=(embed_dim, feature_dim))
    params = EncoderParams(W=W)
    query = _random_feature(rng, feature_dim)
    cands = [_random_feature(rng, feature_dim) for _ in range(n_cands)]
    selected = int(rng.integers(n_cands))

    analytic = log_policy_grad(params, query, cands, selected, tau)
    if corrupt:
        analytic = analytic.copy()
        analytic[0, 0] += 1e-2

    qd = _dense(query, feature_dim)
    cd = [_dense(c, feature_dim) for c in cands]
    numeric = _central_diff(W, lambda: _log_policy_value_dense(W, qd, cd, selected, tau))
    return relative_error(analytic, numeric)


def check_kl(rng: np.random.Generator, corrupt: bool = False) -> float:
    embed_dim = int(rng.integers(2, 9))
    feature_dim = int(rng.integers(8, 33))
    n_support = int(rng.integers(2, 6))
    tau = float(rng.choice([0.5, 1.0, 2.0]))
    W = rng.normal(size=(embed_dim, feature_dim))
    params = EncoderParams(W=W)
    queries = [_random_feature(rng, feature_dim) for _ in range(n_support)]
    docs = [_random_feature(rng, feature_dim) for _ in range(n_support)]
    rewards = rng.uniform(0.05, 0.95, size=n_support)

    analytic = np.zeros_like(W)
    _kl_terms(params, queries, docs, rewards, tau, 1.0, analytic)
    if corrupt:
        analytic[0, 0] += 1e-2

    q_dist = _rated_distribution(rewards, 1.0)
    qd = [_dense(q, feature_dim) for q in queries]
    dd = [_dense(d, feature_dim) for d in docs]
    numeric = _central_diff(W, lambda: _kl_value_dense(W, qd, dd, q_dist, tau))
    return relative_error(analytic, numeric)


def run(
    instances: int = 100,
    seed: int = 0,
    threshold: float = 1e-5,
    corrupt: bool = False,
) -> GradCheckResult:
    """Run both finite-difference suites over randomized instances."""
    rng = np.random.default_rng(seed)
    max_lp = 0.0
    max_kl = 0.0
    for _ in range(instances):
        max_lp = max(max_lp, check_log_policy(rng, corrupt=corrupt))
        max_kl = max(max_kl, check_kl(rng, corrupt=corrupt))
    return GradCheckResult(
        instances=instances,
        max_error_log_policy=max_lp,
        max_error_kl=max_kl,
        threshold=threshold,
        seed=seed,
    )
