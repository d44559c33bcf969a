"""Command-line interface.

Subcommands: ``index``, ``train``, ``eval``, ``decompose``, ``simulate``,
``gradcheck``. Every subcommand echoes its fully resolved configuration as
one JSON line before doing work. Exit codes: 0 success, 1 check or oracle
failure, 2 usage or input error. Configuration comes from an optional JSON
config file, overridden by command-line flags; API tokens are read only from
the environment variable named in the oracle settings.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from . import data, evaluation, gradcheck, simulate
from .encoder import init_params, load_params
from .index import build, save_index
from .oracle import RemoteOracle, RemoteOracleSpec, SimulatedOracle, SimulatedOracleSpec
from .policy import PolicyConfig, fill_questions
from .trainer import OracleOutage, TrainConfig, load_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _echo_config(command: str, resolved: dict) -> None:
    print("config " + json.dumps({"command": command, **resolved}, sort_keys=True, default=str))


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise data.DataFormatError(f"{path}: config must be a JSON object")
    return cfg


def _merged(section: dict, overrides: dict) -> dict:
    out = dict(section)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


def _policy_config(args, file_cfg: dict) -> PolicyConfig:
    merged = _merged(file_cfg.get("policy", {}), {
        "k": args.K,
        "eps_doc": args.epsilon,
        "eps_q": args.epsilon_q,
        "pool_size": args.pool_size,
        "tau": args.tau,
        "max_samples": args.max_samples,
        "final_reward_weight": args.final_reward_weight,
        "mode": args.mode,
    })
    return PolicyConfig(**merged)


def _train_config(args, file_cfg: dict) -> TrainConfig:
    merged = _merged(file_cfg.get("train", {}), {
        "learning_rate": args.lr,
        "batch_size": args.batch,
        "warmup_ratio": args.warmup,
        "epochs": args.epochs,
        "refresh_every": args.refresh_every,
        "baseline": args.baseline or None,
        "seed": args.seed,
        "algorithm": args.algorithm,
        "embed_dim": args.embed_dim,
        "feature_dim": args.feature_dim,
    })
    return TrainConfig(**merged)


def _build_oracle(args, file_cfg: dict, label_set: tuple[str, ...]):
    section = dict(file_cfg.get("oracle", {}))
    kind = args.oracle or section.pop("kind", "simulated")
    if kind == "simulated":
        spec_path = args.oracle_spec or section.get("spec")
        if not spec_path:
            raise data.DataFormatError("the simulated oracle needs --oracle-spec <file>")
        return SimulatedOracle(SimulatedOracleSpec.load(spec_path), label_set)
    if kind == "remote":
        overrides = {
            "endpoint": args.endpoint,
            "model": args.model,
            "token_env": args.token_env,
            "disk_cache_dir": args.oracle_cache,
        }
        section.pop("kind", None)
        merged = _merged(section, overrides)
        if "endpoint" not in merged or "model" not in merged:
            raise data.DataFormatError("the remote oracle needs --endpoint and --model")
        return RemoteOracle(RemoteOracleSpec(**merged), label_set)
    raise data.DataFormatError(f"unknown oracle kind {kind!r}")


def _load_encoder(path: str):
    """Accept either a training checkpoint or a bare encoder params file."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic == b"RRCKPT1\0":
        return load_checkpoint(path).params
    return load_params(path)[0]


def _setup_logging(args) -> None:
    handlers = [logging.StreamHandler(sys.stderr)]
    if getattr(args, "log_file", None):
        handlers.append(logging.FileHandler(args.log_file))
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
                        handlers=handlers, force=True)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_index(args) -> int:
    file_cfg = _load_config_file(args.config)
    corpus = data.load_corpus(args.corpus, args.exclusions)
    if args.checkpoint:
        params = _load_encoder(args.checkpoint)
    else:
        params = init_params(args.embed_dim or 128, args.feature_dim or 2 ** 18,
                             seed=args.seed or 0)
    _echo_config("index", {
        "corpus": args.corpus, "exclusions": args.exclusions,
        "checkpoint": args.checkpoint, "out": args.out,
        "embed_dim": params.embed_dim, "feature_dim": params.feature_dim,
        "config_file": args.config, "config_file_keys": sorted(file_cfg),
    })
    idx = build(corpus, params)
    save_index(args.out, idx)
    print(f"indexed {len(idx)} documents -> {args.out}")
    return EXIT_OK


def _structured_log_fn(path: str | None):
    if not path:
        return lambda record: print(json.dumps(record, sort_keys=True))
    fh = open(path, "a", encoding="utf-8")

    def log_fn(record: dict) -> None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()
        print(json.dumps(record, sort_keys=True))

    return log_fn


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    claims = data.load_claims(args.claims)
    corpus = data.load_corpus(args.corpus, args.exclusions)

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        policy_cfg, train_cfg = ckpt.policy_cfg, ckpt.train_cfg
    else:
        ckpt = None
        policy_cfg = _policy_config(args, file_cfg)
        train_cfg = _train_config(args, file_cfg)

    oracle = _build_oracle(args, file_cfg, claims.label_set)
    _echo_config("train", {
        "claims": args.claims, "corpus": args.corpus,
        "policy": asdict(policy_cfg), "train": asdict(train_cfg),
        "oracle": type(oracle).__name__, "resume": args.resume,
        "checkpoint_out": args.checkpoint_out,
    })

    if policy_cfg.mode != "d":
        claims = fill_questions(claims, oracle)

    log_fn = _structured_log_fn(args.log_file)
    trace_fn = None
    if args.trace:
        trace_file = open(args.trace, "a", encoding="utf-8")
        trace_fn = lambda record: trace_file.write(
            json.dumps(record, sort_keys=True) + "\n"
        )
    try:
        final = train(
            claims, corpus, oracle, policy_cfg, train_cfg,
            checkpoint_path=args.checkpoint_out, log_fn=log_fn,
            trace_fn=trace_fn, resume=ckpt,
        )
    except OracleOutage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    print(f"trained {final.update} updates over {final.epoch} epochs"
          f" (fingerprint {final.fingerprint()})")
    return EXIT_OK


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    claims = data.load_claims(args.claims)
    corpus = data.load_corpus(args.corpus, args.exclusions)
    ckpt = load_checkpoint(args.checkpoint)
    policy_cfg = ckpt.policy_cfg
    if args.mode:
        policy_cfg = PolicyConfig(**{**asdict(policy_cfg), "mode": args.mode})
    oracle = _build_oracle(args, file_cfg, claims.label_set)
    _echo_config("eval", {
        "claims": args.claims, "corpus": args.corpus, "checkpoint": args.checkpoint,
        "policy": asdict(policy_cfg), "report": args.report,
    })
    if policy_cfg.mode != "d":
        claims = fill_questions(claims, oracle)
    index = build(corpus, ckpt.params)
    report = evaluation.evaluate(
        claims, index, ckpt.params, oracle, policy_cfg,
        report_path=args.report,
        config_echo={"checkpoint": args.checkpoint, "mode": policy_cfg.mode,
                     "k": policy_cfg.k, "eps_doc": policy_cfg.eps_doc,
                     "eps_q": policy_cfg.eps_q,
                     "checkpoint_fingerprint": ckpt.fingerprint()},
    )
    print(json.dumps({
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "paper_f1": report.paper_f1,
        "mean_class_f1": report.mean_class_f1,
        "claims": report.claim_count,
        "unevaluated": len(report.unevaluated),
    }, sort_keys=True))
    return EXIT_OK


def cmd_decompose(args) -> int:
    file_cfg = _load_config_file(args.config)
    claims = data.load_claims(args.claims)
    oracle = _build_oracle(args, file_cfg, claims.label_set)
    _echo_config("decompose", {
        "claims": args.claims, "out": args.out, "oracle": type(oracle).__name__,
    })
    filled = fill_questions(claims, oracle)
    data.save_claims(filled, args.out)
    n_filled = sum(1 for c in filled.claims if c.questions)
    print(f"decomposed {n_filled}/{len(filled)} claims -> {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = simulate.ScenarioConfig(
        docs=args.docs, claims=args.claims, labels=args.labels,
        evidence_per_claim=args.evidence, distractors_per_claim=args.distractors,
        seed=args.seed if args.seed is not None else 42,
    )
    train_cfg = simulate.default_train_config(
        seed=scenario.seed,
        epochs=args.epochs if args.epochs is not None else 10,
        algorithm=args.algorithm or "ffrr",
    )
    if args.lr is not None:
        train_cfg.learning_rate = args.lr
    policy_cfg = PolicyConfig(mode=args.mode or "d")
    _echo_config("simulate", {
        "scenario": asdict(scenario), "policy": asdict(policy_cfg),
        "train": asdict(train_cfg), "out": args.out,
    })

    checkpoint_path = None
    if args.out:
        import os

        os.makedirs(args.out, exist_ok=True)
        claims, corpus, spec = simulate.build_scenario(scenario)
        data.save_claims(claims, os.path.join(args.out, "claims.jsonl"))
        data.save_corpus(corpus, os.path.join(args.out, "corpus.jsonl"))
        spec.save(os.path.join(args.out, "oracle_spec.json"))
        checkpoint_path = os.path.join(args.out, "checkpoint.bin")

    result = simulate.run_benchmark(scenario, policy_cfg, train_cfg,
                                    checkpoint_path=checkpoint_path)
    print(json.dumps({
        "mode": result.mode, "algorithm": result.algorithm,
        "recall_at_k_before": result.pre_recall,
        "recall_at_k_after": result.post_recall,
        "recall_gain": result.recall_gain,
        "macro_f1_before": result.pre_report.paper_f1,
        "macro_f1_after": result.post_report.paper_f1,
        "f1_gain": result.f1_gain,
    }, sort_keys=True))
    if not result.finite():
        print("error: non-finite metrics after training", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo_config("gradcheck", {
        "instances": args.instances, "seed": args.seed or 0,
        "threshold": args.threshold,
    })
    result = gradcheck.run(
        instances=args.instances, seed=args.seed or 0,
        threshold=args.threshold, corrupt=args.corrupt,
    )
    print(f"log-policy gradient max relative error: {result.max_error_log_policy:.3e}")
    print(f"kl gradient max relative error:         {result.max_error_kl:.3e}")
    if not result.passed:
        print(f"error: gradient check failed (threshold {result.threshold:g}, "
              f"seed {result.seed})", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_oracle_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--oracle", choices=["simulated", "remote"], default=None)
    p.add_argument("--oracle-spec", default=None, help="simulated oracle spec file")
    p.add_argument("--endpoint", default=None, help="remote oracle URL")
    p.add_argument("--model", default=None, help="remote oracle model name")
    p.add_argument("--token-env", default=None,
                   help="environment variable holding the bearer token")
    p.add_argument("--oracle-cache", default=None, help="on-disk response cache dir")


def _add_policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["d", "q", "d+q"], default=None)
    p.add_argument("--K", type=int, default=None, dest="K")
    p.add_argument("--epsilon", type=float, default=None, help="document-level epsilon")
    p.add_argument("--epsilon-q", type=float, default=None, help="question-level epsilon")
    p.add_argument("--pool-size", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--max-samples", type=int, default=None)
    p.add_argument("--final-reward-weight", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlretrieval",
        description="Train and evaluate reward-driven retrieval for claim verification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build and write a dense corpus index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--exclusions", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("train", help="train the retrieval policy")
    p.add_argument("--claims", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--exclusions", default=None)
    _add_policy_flags(p)
    p.add_argument("--algorithm", choices=["ffrr", "replug"], default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--warmup", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--refresh-every", type=int, default=None)
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=None)
    p.add_argument("--feature-dim", type=int, default=None)
    p.add_argument("--checkpoint-out", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--trace", default=None, help="append per-step episode trace records here")
    _add_oracle_flags(p)
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="run inference and macro P/R/F1 evaluation")
    p.add_argument("--claims", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--exclusions", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=["d", "q", "d+q"], default=None)
    p.add_argument("--report", default=None)
    _add_oracle_flags(p)
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decompose", help="fill claim questions via the oracle")
    p.add_argument("--claims", required=True)
    p.add_argument("--out", required=True)
    _add_oracle_flags(p)
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_decompose)

    p = sub.add_parser("simulate", help="run the synthetic end-to-end benchmark")
    p.add_argument("--docs", type=int, default=500)
    p.add_argument("--claims", type=int, default=60)
    p.add_argument("--labels", type=int, default=3)
    p.add_argument("--evidence", type=int, default=2)
    p.add_argument("--distractors", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=["d", "q", "d+q"], default=None)
    p.add_argument("--algorithm", choices=["ffrr", "replug"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", default=None, help="write scenario files and checkpoint here")
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threshold", type=float, default=1e-5)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--config", default=None)
    p.add_argument("--log-file", default=None)
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args)
    try:
        return args.fn(args)
    except (FileNotFoundError, data.DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
