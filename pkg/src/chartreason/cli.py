"""Command line surface.

Subcommands: parse, plan, synth, train, eval, ablate, gradcheck.  Exit codes:
0 success, 2 usage, 3 configuration, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .autodiff import (
    CheckpointMismatch,
    ParamStore,
    Tensor,
    TensorError,
    add,
    finite_diff_check,
    mul,
    scale,
    sum_all,
)
from .decoding import AnswerDecoder, DecoderConfig, Vocab
from .graph import (
    GraphError,
    OperatorNode,
    OpType,
    ThoughtGraph,
    deserialize,
    plan,
    serialize,
    to_dot,
    validate,
)
from .harness import (
    ConfigError,
    NonFiniteLoss,
    RunConfig,
    ablate,
    evaluate,
    format_ablation_table,
    layer_sweep_variants,
    load_run_config,
    ablation_grid_variants,
    train,
)
from .reasoning import ModelConfig, assemble, execute
from .synth import (
    CorpusConfig,
    CorpusError,
    ExecutorError,
    read_corpus,
    write_split_corpora,
)
from .templates import ParserError, load_default_rules, load_rules, parse_with_fallback

_RUNTIME_ERRORS = (ParserError, CorpusError, NonFiniteLoss, CheckpointMismatch,
                   GraphError, TensorError, ExecutorError, OSError)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chartreason",
        description="Chart question answering with graph-guided compositional reasoning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="parse a question into an operator graph")
    p.add_argument("question")
    p.add_argument("--rules", help="rule file (default: built-in rules)")
    p.add_argument("--dot", action="store_true", help="emit DOT instead of JSON")
    p.add_argument("--provider", help="fallback parser endpoint URL")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("plan", help="show the stepwise execution plan of a graph")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--question", help="parse this question first")
    src.add_argument("--got", help="read a serialized graph from this file")
    p.add_argument("--rules")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("synth", help="generate a synthetic QA corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--charts", type=int, default=8, help="charts per split")
    p.add_argument("--questions-per-chart", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--splits", default="train=8",
                   help="comma list of name=n_charts, e.g. train=8,val=2")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--corpus", help="training corpus (JSONL)")
    p.add_argument("--ckpt", help="checkpoint path to write")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--warmup-steps", type=int,
                   help="linear learning-rate ramp over this many steps")
    p.add_argument("--lr-floor", type=float,
                   help="cosine-decay endpoint as a fraction of --lr (default 1: flat)")
    p.add_argument("--d", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--arch", choices=("self_cross", "cross_cross", "self_self"))
    p.add_argument("--mode", choices=("one", "find_log", "loc_num_log"))
    p.add_argument("--no-graph", action="store_true", help="disable graph guidance")
    p.add_argument("--verbose", action="store_true", help="print per-step losses")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--provider")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    p.add_argument("--train-corpus", required=True)
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--ckpt", default="ablation.ckpt", help="checkpoint path prefix")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--sweep-layers", help="comma list of depths instead of the 5-variant grid")
    p.add_argument("--records", help="write per-variant JSONL records here")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the whole model")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sample", type=int, default=2,
                   help="coordinates checked per tensor")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def _load_ruleset(path: str | None):
    return load_rules(path) if path else load_default_rules()


def _cmd_parse(args) -> int:
    rules = _load_ruleset(args.rules)
    got, source = parse_with_fallback(args.question, rules, endpoint=args.provider)
    print(to_dot(got) if args.dot else serialize(got))
    print(f"source: {source}", file=sys.stderr)
    return 0


def _cmd_plan(args) -> int:
    if args.question is not None:
        got, _ = parse_with_fallback(args.question, _load_ruleset(args.rules))
    else:
        with open(args.got, encoding="utf-8") as f:
            got = deserialize(f.read())
        report = validate(got)
        if not report.ok:
            raise GraphError(f"graph does not validate: {report.violations}")
    for i, step in enumerate(plan(got).steps):
        print(f"step {i}: " + " ".join(str(n) for n in step))
    return 0


def _parse_splits(text: str) -> dict[str, int]:
    splits: dict[str, int] = {}
    for part in text.split(","):
        name, _, number = part.partition("=")
        if not name or not number:
            raise ConfigError(f"bad splits entry {part!r}, expected name=n")
        try:
            splits[name.strip()] = int(number)
        except ValueError as e:
            raise ConfigError(f"bad splits entry {part!r}: {e}") from e
    return splits


def _cmd_synth(args) -> int:
    splits = _parse_splits(args.splits)
    for name, n in splits.items():
        if n <= 0:
            raise ConfigError(f"split {name!r} needs a positive chart count")
    try:
        config = CorpusConfig(n_charts=args.charts, seed=args.seed,
                              questions_per_chart=args.questions_per_chart)
    except CorpusError as e:
        raise ConfigError(str(e)) from e
    manifest = write_split_corpora(args.out, config, load_default_rules(), splits)
    for name, info in sorted(manifest["splits"].items()):
        print(f"{name}: {info['n_examples']} examples -> {info['path']} (seed {info['seed']})")
    return 0


def _apply_train_overrides(run: RunConfig, args) -> RunConfig:
    if args.corpus is not None:
        run.train_corpus = args.corpus
    if args.ckpt is not None:
        run.ckpt = args.ckpt
    for key in ("steps", "lr", "seed"):
        value = getattr(args, key)
        if value is not None:
            setattr(run, key, value)
    if args.batch_size is not None:
        run.batch_size = args.batch_size
    if args.warmup_steps is not None:
        run.warmup_steps = args.warmup_steps
    if args.lr_floor is not None:
        run.lr_floor = args.lr_floor
    meta = run.model.to_meta()
    if args.d is not None:
        meta["d"] = args.d
    if args.heads is not None:
        meta["heads"] = args.heads
    if args.arch is not None:
        meta["attention_arch"] = args.arch
    if args.mode is not None:
        meta["operator_mode"] = args.mode
    if args.no_graph:
        meta["got_enabled"] = False
    try:
        run.model = ModelConfig.from_meta(meta)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    return run


def _cmd_train(args) -> int:
    run = _apply_train_overrides(load_run_config(args.config), args)
    if run.train_corpus is None:
        raise ConfigError("no training corpus: pass --corpus or set train.train_corpus")
    run.validated()
    triples = read_corpus(run.train_corpus)
    log = None
    if args.verbose:
        log = lambda step, loss: print(f"step {step} loss {loss:.6f}")
    result = train(run, triples, log=log)
    print(f"final-loss {result.losses[-1]:.6f}")
    print(f"checkpoint {result.ckpt}")
    return 0


def _cmd_eval(args) -> int:
    triples = read_corpus(args.corpus)
    report = evaluate(args.ckpt, triples, tol=args.tol, provider=args.provider)
    hits = {}
    for r in report.records:
        hits[r["qtype"]] = hits.get(r["qtype"], 0) + int(r["correct"])
    print(f"overall {report.overall:.3f} ({sum(hits.values())}/{report.n})")
    for q in sorted(report.counts):
        print(f"{q} {report.by_qtype[q]:.3f} ({hits.get(q, 0)}/{report.counts[q]})")
    print(f"wall-time {report.wall_time:.1f}s")
    return 0


def _cmd_ablate(args) -> int:
    run = load_run_config(args.config)
    run.train_corpus = args.train_corpus
    run.eval_corpus = args.eval_corpus
    run.ckpt = args.ckpt
    if args.steps is not None:
        run.steps = args.steps
    if args.seed is not None:
        run.seed = args.seed
    run.validated()
    train_triples = read_corpus(run.train_corpus)
    eval_triples = read_corpus(run.eval_corpus)
    if args.sweep_layers:
        try:
            depths = [int(x) for x in args.sweep_layers.split(",")]
        except ValueError as e:
            raise ConfigError(f"bad --sweep-layers: {e}") from e
        variants = layer_sweep_variants(run.model, depths)
    else:
        variants = ablation_grid_variants(run.model)
    report = ablate(run, variants, train_triples, eval_triples,
                    log=lambda row: print(f"done {row.name}: {row.status}", file=sys.stderr))
    print(format_ablation_table(report))
    if args.records:
        with open(args.records, "w", encoding="utf-8") as f:
            for row in report.rows:
                f.write(json.dumps(row.__dict__, sort_keys=True) + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    try:
        config = ModelConfig(d=args.d, heads=args.heads, self_data_layers=1,
                             op_layers=1, guidance_len=8)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    vocab = Vocab.build("locate value at target of p1 p2 diff".split())
    store = ParamStore(seed=args.seed)
    got = ThoughtGraph(
        nodes=[OperatorNode(1, "locate p1", OpType.LOC),
               OperatorNode(2, "locate p2", OpType.LOC),
               OperatorNode(3, "value at target", OpType.NUM),
               OperatorNode(4, "value at target", OpType.NUM),
               OperatorNode(5, "diff", OpType.LOG)],
        edges=frozenset({(1, 3), (2, 4), (3, 5), (4, 5)}),
    )
    net = assemble(got, config, store, vocab)
    decoder = AnswerDecoder(vocab, DecoderConfig(d=args.d, heads=args.heads), store)
    rng = np.random.default_rng(args.seed)
    c_v = Tensor(rng.normal(size=(6, args.d)), requires_grad=True)
    wrt = [c_v] + store.parameters()
    # biases start at zero, a special point that can hide sign errors; check
    # at a generic one instead
    for t in wrt[1:]:
        t.data = t.data + rng.normal(scale=0.05, size=t.data.shape)

    def objective(*_):
        # attention key biases cannot move the task loss at all (row softmax
        # is shift invariant), so a pure cross-entropy objective leaves them
        # ungraded and their check compares rounding noise against the
        # relative-error floor; the quadratic term gives every coordinate a
        # well-conditioned signal while the full task path is still exercised
        loss = decoder.teacher_forced_loss(execute(net, c_v).o_end, "42")
        for t in wrt:
            loss = add(loss, scale(sum_all(mul(t, t)), 0.05))
        return loss

    err = finite_diff_check(objective, wrt, h=1e-4, sample=args.sample,
                            rng=np.random.default_rng(args.seed))
    print(f"max-rel-err {err:.3e} over {len(wrt)} tensors")
    if err < 1e-4:
        return 0
    print("gradcheck FAILED (>= 1e-4)", file=sys.stderr)
    return 4


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except _RUNTIME_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
