"""Operator surface: ingest, train, retrieve, eval.

Exit codes: 0 success, 1 user error (bad arguments, bad files, bad config),
2 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import environment, evaluation, store as store_mod
from .config import RunConfig
from .encoding import build_embedder
from .errors import ConfigError, IngestError
from .model import build_model, iterative_trajectory, load_model
from .trainer import Trainer

USER_ERRORS = (ConfigError, IngestError, FileNotFoundError, NotADirectoryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; user errors are 1
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_common(parser) -> None:
    parser.add_argument("--config", help="config file of 'key = value' lines")
    parser.add_argument("--run-dir", required=True, help="run directory for artifacts")
    parser.add_argument("--seed", type=int, help="override the seed config key")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override any config key (repeatable)",
    )


def _load_config(args, extra: dict | None = None) -> RunConfig:
    overrides = dict(extra or {})
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def _prepare_run_dir(args, config: RunConfig) -> Path:
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.resolved").write_text(config.resolved_text(), encoding="utf-8")
    return run_dir


def _resolver_from_pairs(*pair_lists):
    lookup = {}
    for pairs in pair_lists:
        for text, parse in pairs:
            lookup[text] = parse
    def resolve(query: str) -> str:
        if query not in lookup:
            raise ConfigError(f"synthetic environment has no reference for query {query!r}")
        return lookup[query]
    return resolve


# --- subcommands -------------------------------------------------------------


def cmd_ingest(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, config)
    pairs = store_mod.load_jsonl(args.dataset)
    embedder = build_embedder(config)
    st = store_mod.ingest(pairs, embedder, embed_pair=config["encoder.embed_pair"])
    encoder_meta = {
        "kind": config["encoder.kind"],
        "dim": config["encoder.dim"],
        "seed": config["encoder.seed"],
        "embed_pair": config["encoder.embed_pair"],
    }
    store_mod.save_store(st, run_dir / "store", encoder_meta)
    print(f"ingested {len(st)} exemplars, dim {st.dim}")
    return 0


def cmd_train(args) -> int:
    extra = {}
    if args.episodes is not None:
        extra["train.total_episodes"] = args.episodes
    if args.env is not None:
        extra["env.kind"] = args.env
    config = _load_config(args, extra)
    run_dir = _prepare_run_dir(args, config)

    store_dir = Path(args.store) if args.store else run_dir / "store"
    st = store_mod.load_store(store_dir)
    embedder = build_embedder(config)
    train_pairs = store_mod.load_jsonl(args.train_data)
    dev_pairs = store_mod.load_jsonl(args.dev_data) if args.dev_data else None

    exemplar_pairs = [(e.input_text, e.output_text) for e in st.exemplars]
    resolver = _resolver_from_pairs(exemplar_pairs, train_pairs, dev_pairs or [])
    env = environment.build_env(config, resolver=resolver)
    cfg = config.ppo()

    if args.resume:
        trainer = Trainer.resume(
            args.resume, st, env, embedder, train_pairs, cfg,
            seed=config["seed"], run_dir=run_dir, dev_pairs=dev_pairs,
            config_echo=config.echo(),
        )
    else:
        model = build_model(st.dim, config["init.kind"], config["seed"],
                            beta=config["policy.beta"])
        trainer = Trainer(
            model, st, env, embedder, train_pairs, cfg,
            seed=config["seed"], run_dir=run_dir, dev_pairs=dev_pairs,
            config_echo=config.echo(),
        )
    result = trainer.run(config["train.total_episodes"])
    print(
        f"trained {trainer.episodes_done} episodes over {len(result.rows)} iterations; "
        f"{len(result.checkpoints)} checkpoints in {run_dir / 'checkpoints'}"
    )
    return 0


def _retrieval_ids(kind, model, st, query_emb, query_text, steps, config, rng):
    if kind == "iterative":
        return iterative_trajectory(
            model, st, query_emb, steps,
            mode="greedy",
            buffer_size=config["policy.buffer_B"],
            k_candidates=config["policy.k_candidates"],
            strata=config["policy.strata_Ns"],
            beta_renorm=config["policy.beta_renorm"],
        )
    if kind == "mips":
        return store_mod.mips_top(st, query_emb, steps)
    if kind == "bm25":
        return store_mod.bm25_top(st, query_text, steps)
    raise ConfigError(f"unknown retriever {kind!r} (expected iterative, mips, or bm25)")


def cmd_retrieve(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, config)
    store_dir = Path(args.store) if args.store else run_dir / "store"
    st = store_mod.load_store(store_dir)
    if args.k > len(st):
        raise ConfigError(f"K={args.k} exceeds store size {len(st)}")
    model, _, _ = load_model(args.checkpoint)
    embedder = build_embedder(config)
    query_emb = embedder.embed(args.query)
    rng = np.random.default_rng([config["seed"], 0x05]) if args.mode == "sampled" else None
    picks = iterative_trajectory(
        model, st, query_emb, args.k,
        mode=args.mode, rng=rng,
        buffer_size=config["policy.buffer_B"],
        k_candidates=config["policy.k_candidates"],
        strata=config["policy.strata_Ns"],
        beta_renorm=config["policy.beta_renorm"],
    )
    exemplars = [st[i] for i, _ in picks]
    out = {
        "query": args.query,
        "mode": args.mode,
        "exemplars": [
            {"id": ex.id, "score": score, "input": ex.input_text, "output": ex.output_text}
            for ex, (_, score) in zip(exemplars, picks)
        ],
        "prompt": environment.render_prompt(exemplars, args.query),
    }
    print(json.dumps(out, indent=2, ensure_ascii=False))
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    run_dir = _prepare_run_dir(args, config)
    store_dir = Path(args.store) if args.store else run_dir / "store"
    st = store_mod.load_store(store_dir)
    model, _, _ = load_model(args.checkpoint)
    embedder = build_embedder(config)
    test_pairs = store_mod.load_jsonl(args.test_data)
    exemplar_pairs = [(e.input_text, e.output_text) for e in st.exemplars]
    env = environment.build_env(
        config, resolver=_resolver_from_pairs(exemplar_pairs, test_pairs)
    )

    steps = args.k if args.k is not None else config["ppo.exemplars_K"]
    if steps > len(st):
        raise ConfigError(f"K={steps} exceeds store size {len(st)}")
    repeats = args.repeats if args.repeats is not None else config["eval.repeats"]
    k_max = config["eval.k_max"]
    kinds = [k.strip() for k in args.baselines.split(",") if k.strip()]

    report = {"k_max": k_max, "repeats": repeats, "exemplars_per_prompt": steps,
              "retrievers": {}}
    for kind in kinds:
        runs = []
        for run_index in range(repeats):
            rng = np.random.default_rng([config["seed"], 0x06, run_index])
            examples = []
            for query, reference in test_pairs:
                query_emb = embedder.embed(query)
                if kind == "iterative" and args.mode == "sampled":
                    picks = iterative_trajectory(
                        model, st, query_emb, steps, mode="sampled", rng=rng,
                        buffer_size=config["policy.buffer_B"],
                        k_candidates=config["policy.k_candidates"],
                        strata=config["policy.strata_Ns"],
                        beta_renorm=config["policy.beta_renorm"],
                    )
                else:
                    picks = _retrieval_ids(kind, model, st, query_emb, query,
                                           steps, config, rng)
                exemplars = [st[i] for i, _ in picks]
                prompt = environment.render_prompt(exemplars, query)
                hyps = [h for h, _ in env.generate(prompt, config["env.beams"])]
                examples.append(
                    evaluation.score_example(hyps, reference, k_max,
                                             config["eval.smatch_restarts"])
                )
            aggregate = evaluation.aggregate_examples(
                examples, k_max, macro=config["eval.smatch_macro"]
            )
            runs.append({"examples": examples, "aggregate": aggregate})
        mean = {}
        for key in (f"em@{k}" for k in range(1, k_max + 1)):
            mean[key] = float(np.mean([r["aggregate"][key] for r in runs]))
        for part in ("p", "r", "f"):
            mean[f"smatch_{part}"] = float(
                np.mean([r["aggregate"]["smatch"][part] for r in runs])
            )
        report["retrievers"][kind] = {"runs": runs, "mean": mean}

    out_path = run_dir / "report.json"
    out_path.write_text(json.dumps(report, indent=2), encoding="utf-8")
    for kind in kinds:
        mean = report["retrievers"][kind]["mean"]
        ems = " ".join(f"em@{k}={mean[f'em@{k}']:.3f}" for k in range(1, k_max + 1))
        print(f"{kind}: {ems} smatch_f={mean['smatch_f']:.3f}")
    print(f"report written to {out_path}")
    return 0


# --- entry point --------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="retloop", description="iterative exemplar retrieval")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="embed a JSONL dataset into a store")
    _add_common(p_ingest)
    p_ingest.add_argument("dataset", help="JSONL with 'input' and 'output' fields")
    p_ingest.set_defaults(func=cmd_ingest)

    p_train = sub.add_parser("train", help="train the retrieval policy")
    _add_common(p_train)
    p_train.add_argument("--train-data", required=True, help="training queries JSONL")
    p_train.add_argument("--dev-data", help="validation queries JSONL")
    p_train.add_argument("--store", help="store directory (default: RUN_DIR/store)")
    p_train.add_argument("--episodes", type=int, help="override train.total_episodes")
    p_train.add_argument("--env", choices=["synthetic", "remote"], help="override env.kind")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.set_defaults(func=cmd_train)

    p_retrieve = sub.add_parser("retrieve", help="run the retriever on one query")
    _add_common(p_retrieve)
    p_retrieve.add_argument("--checkpoint", required=True)
    p_retrieve.add_argument("--query", required=True)
    p_retrieve.add_argument("-K", "--k", type=int, default=10, dest="k")
    p_retrieve.add_argument("--mode", choices=["greedy", "sampled"], default="greedy")
    p_retrieve.add_argument("--store", help="store directory (default: RUN_DIR/store)")
    p_retrieve.set_defaults(func=cmd_retrieve)

    p_eval = sub.add_parser("eval", help="score retrievers on a test set")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--test-data", required=True)
    p_eval.add_argument("--store", help="store directory (default: RUN_DIR/store)")
    p_eval.add_argument("--baselines", default="iterative,mips,bm25",
                        help="comma-separated retriever list")
    p_eval.add_argument("--repeats", type=int, help="inference runs to average over")
    p_eval.add_argument("-K", "--k", type=int, dest="k", help="exemplars per prompt")
    p_eval.add_argument("--mode", choices=["greedy", "sampled"], default="greedy",
                        help="iterative retrieval mode")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
