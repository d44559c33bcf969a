"""Reward-driven retrieval policy training for evidence-based claim verification."""

from .data import Claim, ClaimSet, Corpus, Document, load_claims, load_corpus, validate
from .encoder import EncoderParams, FeatureVector, encode, featurize, init_params, log_policy_grad
from .evaluation import EvalReport, Prediction, evaluate, macro_prf, predict
from .index import DenseIndex, RankedCandidates, build, distribution, refresh, retrieve
from .oracle import (
    LabelScoreDistribution,
    OracleError,
    RemoteOracle,
    RemoteOracleSpec,
    SimulatedOracle,
    SimulatedOracleSpec,
)
from .policy import (
    Episode,
    PolicyConfig,
    epsilon_greedy_sample,
    run_document_episode,
    run_hybrid_episode,
    run_question_episode,
    select_inference_docs,
)
from .trainer import (
    AdamState,
    Checkpoint,
    TrainConfig,
    episode_return,
    load_checkpoint,
    reinforce_update,
    replug_update,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
