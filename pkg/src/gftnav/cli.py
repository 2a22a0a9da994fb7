"""Command-line entry point: ``gftnav <subcommand> ...``."""
from __future__ import annotations

import argparse
import glob
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .a2c import Trainer
from .agent import AgentConfig, gft_transforms
from .analysis import analyze_transforms
from .config import ExperimentConfig
from .env import level_config
from .evaluate import AgentPolicy, OraclePolicy, agent_from_params, random_baseline, run_evaluation, \
    run_generalization
from .grammar import Grammar, Vocabulary
from .replay import record_episode, replay_episode
from .teacher import TASKS, TaskType, new_session


def tokenize(text: str) -> list[str]:
    return re.findall(r"[a-z]+|[.!?]", text.lower())


def _grammar(cfg: ExperimentConfig) -> Grammar:
    vocab = Vocabulary.load(cfg.vocab) if cfg.vocab else Vocabulary.load()
    return Grammar.load(cfg.grammar, vocab) if cfg.grammar else Grammar.load(vocab=vocab)


def _checkpoints(pattern: str) -> list[Path]:
    paths = sorted(Path(p) for p in glob.glob(pattern))
    if not paths:
        raise FileNotFoundError(f"no checkpoint matches {pattern!r}")
    return paths


def _agents(paths):
    out = []
    for p in paths:
        ck = ckpt_io.load(p)
        out.append(agent_from_params(AgentConfig(**ck.meta["agent"]), ck.exact_params()))
    return out


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    grammar = _grammar(cfg)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        trainer = ckpt_io.restore_trainer(ckpt_io.load(args.resume), grammar)
    else:
        trainer = Trainer(cfg.agent, cfg.trainer, seed=cfg.seed, grammar=grammar)
    total = args.minibatches if args.minibatches is not None else cfg.trainer.minibatches
    remaining = max(0, total - trainer.batch)

    def save(tr):
        ckpt_io.checkpoint_io("save", out / f"ckpt_{tr.batch:08d}.xgft", tr, cfg.to_dict())

    mode = "a" if args.resume else "w"
    with open(out / "metrics.jsonl", mode) as fh:
        trainer.run(remaining, fh, on_checkpoint=save)
    save(trainer)
    print(f"trained to minibatch {trainer.batch} ({trainer.env_steps} env steps); outputs in {out}")
    return 0


def _print_report(rep, label=""):
    print(label + rep.table())
    for k, run in enumerate(rep.runs):
        print(f"  run {k}: " + ", ".join(f"{t}={v}" for t, v in run.items()))


def cmd_eval(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    grammar = _grammar(cfg)
    paths = _checkpoints(args.checkpoints)
    policies = [AgentPolicy(a, greedy=not args.stochastic, seed=cfg.eval_seed) for a in _agents(paths)]
    level = args.level or cfg.trainer.max_level
    rep = run_evaluation(policies, level_config(level), args.sessions or cfg.eval_sessions, grammar,
                         cfg.eval_seed, selection="stochastic" if args.stochastic else "greedy")
    _print_report(rep)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_level{level}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_generalize(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    grammar = _grammar(cfg)
    policies = [AgentPolicy(a, seed=cfg.eval_seed) for a in _agents(_checkpoints(args.checkpoints))]
    sizes = [int(s) for s in args.sizes.split(",") if s]
    reports = run_generalization(policies, sizes, args.sessions or cfg.eval_sessions, grammar, cfg.eval_seed)
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    for size, rep in reports.items():
        _print_report(rep)
        (out / f"generalize_{size}.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_analyze(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    grammar = _grammar(cfg)
    agent = _agents([args.checkpoint])[0]
    vocab = grammar.vocab
    pairs = []
    for n, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "|" not in line:
            raise ValueError(f"{args.pairs}:{n}: expected 'command A | command B'")
        a, b = line.split("|", 1)
        pairs.append((vocab.ids(tokenize(a)), vocab.ids(tokenize(b))))
    rng = np.random.default_rng(cfg.eval_seed)
    refs = [vocab.ids([w for _, w in grammar.sample(rng)]) for _ in range(args.refs)]
    out = cfg.output_path() / "fingerprints"
    analyze_transforms(lambda toks: gft_transforms(agent, toks), pairs, refs, out)
    print(f"wrote fingerprints for {len(pairs)} pairs to {out}")
    return 0


def cmd_record(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    grammar = _grammar(cfg)
    rng = np.random.default_rng(args.seed)
    session = new_session(level_config(args.level), grammar, rng, TaskType(args.task) if args.task else None)
    policy = AgentPolicy(_agents([args.checkpoint])[0]) if args.checkpoint else OraclePolicy()
    recs = record_episode(policy, session, args.out)
    print(f"{session.command.text!r}: {len(recs)} steps, outcome {recs[-1]['outcome']}; trace {args.out}")
    return 0


def cmd_replay(args) -> int:
    out = Path(args.out) if args.out else Path(args.trace).with_suffix("")
    frames = replay_episode(args.trace, out)
    print(f"replayed {len(frames) - 1} steps into {len(frames)} frames under {out}")
    return 0


def cmd_grammar_stats(args) -> int:
    vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary.load()
    g = Grammar.load(args.grammar, vocab)
    total = len(g.sentences())
    lo, hi = g.length_range()
    print(f"distinct sentences: {total}")
    print(f"derivations: {g.derivation_count()}")
    print(f"length range: {lo}..{hi}")
    for t in TASKS:
        if t.rule in g.rules:
            print(f"  {t.value:<10} {len(g.sentences(t.rule))}")
    return 0


def cmd_baseline(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    rate = random_baseline(level_config(args.level), _grammar(cfg), args.sessions, cfg.eval_seed,
                           TaskType(args.task))
    print(f"random-policy {args.task} success at level {args.level}: {float(rate):.1f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gftnav", description="language-directed navigation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train an agent")
    s.add_argument("config")
    s.add_argument("--minibatches", type=int, help="total minibatches to reach, counting resumed ones")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate checkpoints at the final curriculum level")
    s.add_argument("config")
    s.add_argument("--checkpoints", required=True, help="glob of checkpoint files")
    s.add_argument("--sessions", type=int)
    s.add_argument("--level", type=int)
    s.add_argument("--stochastic", action="store_true", help="sample actions instead of argmax")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("generalize", help="evaluate on the larger maps")
    s.add_argument("config")
    s.add_argument("--checkpoints", required=True)
    s.add_argument("--sizes", default="9,10,11")
    s.add_argument("--sessions", type=int)
    s.set_defaults(func=cmd_generalize)

    s = sub.add_parser("analyze", help="export transform fingerprints for command pairs")
    s.add_argument("config")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--pairs", required=True, help="file with one 'command A | command B' per line")
    s.add_argument("--refs", type=int, default=5000)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("record", help="record one episode trace")
    s.add_argument("config")
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="agent checkpoint; the BFS oracle plays when omitted")
    s.add_argument("--level", type=int, default=1)
    s.add_argument("--task", choices=[t.value for t in TASKS])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_record)

    s = sub.add_parser("replay", help="re-render a recorded trace to PPM frames")
    s.add_argument("trace")
    s.add_argument("--out")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("grammar-stats", help="count the sentences a grammar generates")
    s.add_argument("grammar")
    s.add_argument("--vocab")
    s.set_defaults(func=cmd_grammar_stats)

    s = sub.add_parser("baseline", help="success rate of a uniform-random policy")
    s.add_argument("config")
    s.add_argument("--level", type=int, default=1)
    s.add_argument("--task", default="nav", choices=[t.value for t in TASKS])
    s.add_argument("--sessions", type=int, default=2000)
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # report, don't dump a traceback
        print(f"gftnav {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
