"""Inference pipeline and macro precision/recall/F1 evaluation.

The headline F1 is 2RP/(R+P) computed from the macro-averaged P and R; the
unweighted mean of per-class F1 scores is reported alongside since the two
differ in general.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Claim, ClaimSet
from .encoder import EncoderParams
from .index import DenseIndex
from .oracle import LabelScoreDistribution, OracleError, RewardOracle
from .policy import PolicyConfig, select_inference_docs

logger = logging.getLogger(__name__)


@dataclass
class Prediction:
    claim_id: str
    predicted: str
    distribution: LabelScoreDistribution
    doc_ids: list[str]


@dataclass
class EvalReport:
    label_set: tuple[str, ...]
    confusion: np.ndarray                    # rows gold, columns predicted
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    macro_precision: float
    macro_recall: float
    paper_f1: float                          # 2RP/(R+P) over macro P and R
    mean_class_f1: float
    claim_count: int
    unevaluated: list[str] = field(default_factory=list)
    config_echo: dict = field(default_factory=dict)

    def to_records(self) -> list[dict]:
        records = [{"kind": "config", **self.config_echo}]
        for i, label in enumerate(self.label_set):
            records.append(
                {
                    "kind": "class",
                    "label": label,
                    "precision": float(self.per_class_precision[i]),
                    "recall": float(self.per_class_recall[i]),
                    "f1": float(self.per_class_f1[i]),
                }
            )
        records.append(
            {
                "kind": "macro",
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "paper_f1": self.paper_f1,
                "mean_class_f1": self.mean_class_f1,
                "claims": self.claim_count,
                "unevaluated": self.unevaluated,
            }
        )
        records.append(
            {
                "kind": "confusion",
                "labels": list(self.label_set),
                "rows": self.confusion.tolist(),
            }
        )
        return records

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.to_records():
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def predict(
    claim: Claim,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    policy_cfg: PolicyConfig,
) -> Prediction:
    """Score all inference documents in one oracle call; the prediction is the
    argmax label (exact ties go to the lowest label-set index)."""
    docs = select_inference_docs(claim, index, params, policy_cfg)
    dist = oracle.score(claim, docs)
    return Prediction(
        claim_id=claim.id,
        predicted=dist.argmax_label(),
        distribution=dist,
        doc_ids=[d.id for d in docs],
    )


def _prf(tp: float, denom: float) -> float:
    return tp / denom if denom > 0 else 0.0


def macro_prf(
    preds: list[Prediction],
    golds: ClaimSet,
    unevaluated: list[str] | None = None,
    config_echo: dict | None = None,
) -> EvalReport:
    """Aggregate predictions into per-class and macro metrics.

    Per-class precision and recall use the zero-denominator-gives-zero rule.
    """
    labels = golds.label_set
    gold_by_id = {c.id: c.gold for c in golds.claims}
    seen: set[str] = set()
    confusion = np.zeros((len(labels), len(labels)), dtype=np.int64)
    for pred in preds:
        if pred.claim_id in seen:
            raise ValueError(f"duplicate prediction for claim {pred.claim_id!r}")
        seen.add(pred.claim_id)
        if pred.claim_id not in gold_by_id:
            raise ValueError(f"prediction for unknown claim {pred.claim_id!r}")
        gi = labels.index(gold_by_id[pred.claim_id])
        pi = labels.index(pred.predicted)
        confusion[gi, pi] += 1

    tp = np.diag(confusion).astype(np.float64)
    precision = np.array([_prf(tp[i], confusion[:, i].sum()) for i in range(len(labels))])
    recall = np.array([_prf(tp[i], confusion[i, :].sum()) for i in range(len(labels))])
    class_f1 = np.array(
        [
            2 * p * r / (p + r) if (p + r) > 0 else 0.0
            for p, r in zip(precision, recall)
        ]
    )
    macro_p = float(precision.mean())
    macro_r = float(recall.mean())
    paper_f1 = 2 * macro_r * macro_p / (macro_r + macro_p) if (macro_r + macro_p) > 0 else 0.0

    return EvalReport(
        label_set=labels,
        confusion=confusion,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=class_f1,
        macro_precision=macro_p,
        macro_recall=macro_r,
        paper_f1=float(paper_f1),
        mean_class_f1=float(class_f1.mean()),
        claim_count=len(preds),
        unevaluated=list(unevaluated or []),
        config_echo=dict(config_echo or {}),
    )


def evaluate(
    split: ClaimSet,
    index: DenseIndex,
    params: EncoderParams,
    oracle: RewardOracle,
    policy_cfg: PolicyConfig,
    report_path: str | None = None,
    config_echo: dict | None = None,
) -> EvalReport:
    """Predict every claim in the split and aggregate macro metrics.

    Oracle failures mark the claim as unevaluated in the report rather than
    dropping it silently.
    """
    if len(split) == 0:
        raise ValueError("evaluation split is empty")
    preds: list[Prediction] = []
    unevaluated: list[str] = []
    for claim in split.claims:
        try:
            preds.append(predict(claim, index, params, oracle, policy_cfg))
        except OracleError as exc:
            logger.warning("claim %s left unevaluated: %s", claim.id, exc)
            unevaluated.append(claim.id)

    echo = dict(config_echo or {})
    echo.setdefault("mode", policy_cfg.mode)
    echo.setdefault("k", policy_cfg.k)
    echo.setdefault("eps_doc", policy_cfg.eps_doc)
    echo.setdefault("eps_q", policy_cfg.eps_q)
    echo.setdefault("checkpoint_fingerprint", params.fingerprint())
    report = macro_prf(preds, split, unevaluated=unevaluated, config_echo=echo)
    if report_path:
        report.write(report_path)
    return report
