"""Training, evaluation with relaxed accuracy, and the ablation grid.

The full pipeline composed end to end: chart table -> token encoder ->
graph-guided reasoning -> answer decoder, trained with Adam on teacher-forced
cross-entropy and evaluated by greedy decoding against the symbolic oracle's
gold answers.

Answer matching is relaxed: numeric answers may deviate from gold by a
proportional tolerance (default 5%), string answers compare case- and
whitespace-insensitively.  Gold strings are stored exactly as the oracle
formats them; both sides are normalized at match time.
"""

from __future__ import annotations

import configparser
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Adam,
    ParamStore,
    Tape,
    Tensor,
    backward,
    load_params,
    save_params,
)
from .charts import ChartEncoder, ChartSpec, spec_tokens
from .decoding import AnswerDecoder, DecoderConfig, Vocab
from .graph import OperatorNode, OpType, ThoughtGraph
from .reasoning import ModelConfig, assemble, execute
from .synth import QATriple
from .templates import ParserError, RuleSet, load_default_rules, parse_with_fallback

PROVIDER_ENV = "CHARTREASON_PROVIDER"


class ConfigError(Exception):
    pass


class NonFiniteLoss(Exception):
    pass


# -------------------------------------------------------------------- metric


def relaxed_match(pred: str, gold: str, tol: float = 0.05) -> bool:
    """Numeric answers match within a proportional tolerance of gold (a gold
    of zero demands exactness); everything else is case-insensitive,
    whitespace-normalized string equality."""
    if tol < 0:
        raise ValueError(f"tolerance must be non-negative, got {tol}")
    p = " ".join(pred.split()).lower()
    g = " ".join(gold.split()).lower()
    try:
        pf, gf = float(p), float(g)
    except ValueError:
        return p == g
    if gf == 0.0:
        return pf == 0.0
    return abs(pf - gf) <= tol * abs(gf)


# --------------------------------------------------------------------- model


def build_vocab(triples: list[QATriple]) -> Vocab:
    """Vocabulary over everything the model reads or writes: chart tokens,
    question words, graph node contents, and gold answers."""
    words: set[str] = set()
    for t in triples:
        words.update(spec_tokens(t.chart))
        words.update(t.question.split())
        words.update(t.gold_answer.split())
        for node in t.gold_got.nodes:
            words.update(node.content.split())
    return Vocab.build(words)


class QAModel:
    """Chart encoder + graph-guided reasoning + answer decoder over one
    shared parameter store."""

    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0,
                 max_chart_len: int = 512, answer_len: int = 16):
        self.config = config
        self.vocab = vocab
        self.store = ParamStore(seed=seed)
        self.encoder = ChartEncoder(vocab, config.d, config.heads, self.store,
                                    max_len=max_chart_len, prefix="enc")
        self.decoder = AnswerDecoder(
            vocab, DecoderConfig(d=config.d, heads=config.heads, max_len=answer_len),
            self.store, prefix="dec",
        )

    def reason(self, chart: ChartSpec, got: ThoughtGraph | None, question: str) -> Tensor:
        c_v = self.encoder.encode(chart)
        net = assemble(got, self.config, self.store, self.vocab, question=question)
        return execute(net, c_v).o_end

    def loss(self, triple: QATriple) -> Tensor:
        o_end = self.reason(triple.chart, triple.gold_got, triple.question)
        return self.decoder.teacher_forced_loss(o_end, triple.gold_answer)

    def answer(self, chart: ChartSpec, got: ThoughtGraph | None, question: str) -> str:
        return self.decoder.decode_greedy(self.reason(chart, got, question))

    def materialize(self) -> None:
        """Create every block parameter up front so optimizers and checkpoint
        loads see the full set before any real example arrives.  Assembly
        instantiates all operator blocks regardless of the probe graph."""
        if self.config.got_enabled:
            probe = ThoughtGraph([OperatorNode(1, "x", OpType.LOC)], [])
            assemble(probe, self.config, self.store, self.vocab)
        else:
            assemble(None, self.config, self.store, self.vocab, question="x")


# ------------------------------------------------------------------ training


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    steps: int = 500
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 1
    seed: int = 0
    ckpt: str = "model.ckpt"
    train_corpus: str | None = None
    eval_corpus: str | None = None
    tol: float = 0.05
    checkpoint_every: int = 0  # 0: only the final checkpoint
    provider: str | None = None
    warmup_steps: int = 0  # linear ramp to the peak rate over this many steps
    lr_floor: float = 1.0  # cosine-decay endpoint as a fraction of lr; 1 keeps it flat

    def validated(self) -> "RunConfig":
        if self.steps <= 0:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if self.batch_size <= 0:
            raise ConfigError(f"batch size must be positive, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.tol < 0:
            raise ConfigError(f"tolerance must be non-negative, got {self.tol}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup steps must be non-negative, got {self.warmup_steps}")
        if not 0.0 <= self.lr_floor <= 1.0:
            raise ConfigError(f"lr floor must lie in [0, 1], got {self.lr_floor}")
        for path in (self.train_corpus, self.eval_corpus):
            if path is not None and not os.path.exists(path):
                raise ConfigError(f"corpus file {path!r} does not exist")
        return self


def lr_at(run: RunConfig, step: int) -> float:
    """Step-wise learning rate: linear warmup to the peak, then cosine decay
    to ``lr_floor * lr``.  Defaults reduce to a constant rate."""
    frac = 1.0 if run.warmup_steps <= 0 else min(1.0, (step + 1) / run.warmup_steps)
    span = max(1, run.steps - run.warmup_steps)
    progress = max(0.0, (step - run.warmup_steps) / span)
    shape = run.lr_floor + (1.0 - run.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return run.lr * frac * shape


@dataclass
class TrainResult:
    model: QAModel
    losses: list[float]
    ckpt: str


def _save_model(run: RunConfig, model: QAModel, losses: list[float]) -> None:
    meta = {"model": model.config.to_meta(),
            "train": {"steps": run.steps, "lr": run.lr, "batch_size": run.batch_size,
                      "seed": run.seed, "warmup_steps": run.warmup_steps,
                      "lr_floor": run.lr_floor}}
    save_params(run.ckpt, model.store.state_arrays(), meta=meta)
    model.vocab.save(run.ckpt + ".vocab")


def train(run: RunConfig, triples: list[QATriple], vocab: Vocab | None = None,
          log: callable = None) -> TrainResult:
    """Adam on teacher-forced cross-entropy, one graph assembly per example.

    Gradients accumulate over ``batch_size`` examples per step and are
    averaged.  The checkpoint plus vocab sidecar and loss log land next to
    ``run.ckpt``.  A non-finite loss aborts immediately; the checkpoint then
    holds the last parameters that produced a finite loss.
    """
    run.validated()
    if not triples:
        raise ConfigError("training needs a non-empty corpus")
    if vocab is None:
        vocab = build_vocab(triples)
    model = QAModel(run.model, vocab, seed=run.seed)
    model.materialize()
    adam = Adam(model.store.parameters(), lr=run.lr, betas=run.betas)
    order_rng = np.random.default_rng(run.seed)
    order: list[int] = []
    losses: list[float] = []
    for step in range(run.steps):
        adam.zero_grad()
        batch_loss = 0.0
        for _ in range(run.batch_size):
            if not order:
                order = list(order_rng.permutation(len(triples)))
            triple = triples[order.pop()]
            with Tape():
                loss = model.loss(triple)
                value = loss.item()
                if not np.isfinite(value):
                    _save_model(run, model, losses)
                    _write_loss_log(run.ckpt, losses)
                    raise NonFiniteLoss(
                        f"loss became non-finite at step {step}; "
                        f"last-good checkpoint saved to {run.ckpt}"
                    )
                backward(loss)
            batch_loss += value
        if run.batch_size > 1:
            for p in adam.params:
                if p.grad is not None:
                    p.grad /= run.batch_size
        adam.lr = lr_at(run, step)
        adam.step()
        losses.append(batch_loss / run.batch_size)
        if log is not None:
            log(step, losses[-1])
        if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
            _save_model(run, model, losses)
    _save_model(run, model, losses)
    _write_loss_log(run.ckpt, losses)
    return TrainResult(model=model, losses=losses, ckpt=run.ckpt)


def _write_loss_log(ckpt: str, losses: list[float]) -> None:
    with open(ckpt + ".loss.log", "w", encoding="utf-8") as f:
        for i, v in enumerate(losses):
            f.write(f"{i} {v:.6f}\n")


def load_model(ckpt: str) -> QAModel:
    arrays, meta = load_params(ckpt)
    vocab = Vocab.load(ckpt + ".vocab")
    config = ModelConfig.from_meta(meta["model"])
    model = QAModel(config, vocab, seed=0)
    model.materialize()
    model.store.load_state(arrays)
    return model


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    overall: float
    by_qtype: dict[str, float]
    counts: dict[str, int]
    n: int
    wall_time: float = field(compare=False, default=0.0)
    records: list = field(compare=False, default_factory=list)


def evaluate(model: QAModel | str, triples: list[QATriple], tol: float = 0.05,
             rules: RuleSet | None = None, provider: str | None = None) -> EvalReport:
    """Greedy-decode every example and score with relaxed matching.

    Questions are parsed fresh (templates, then the provider if configured);
    a parse failure counts as a wrong answer.  In graph-free mode parsing is
    skipped since the model ignores the graph.
    """
    if isinstance(model, str):
        model = load_model(model)
    if rules is None:
        rules = load_default_rules()
    start = time.perf_counter()
    records = []
    hits: dict[str, int] = {}
    counts: dict[str, int] = {}
    for t in triples:
        got = None
        parse_ok = True
        if model.config.got_enabled:
            try:
                got, _ = parse_with_fallback(t.question, rules, endpoint=provider)
            except ParserError:
                parse_ok = False
        if parse_ok:
            pred = model.answer(t.chart, got, t.question)
            correct = relaxed_match(pred, t.gold_answer, tol)
        else:
            pred, correct = "", False
        counts[t.qtype] = counts.get(t.qtype, 0) + 1
        hits[t.qtype] = hits.get(t.qtype, 0) + int(correct)
        records.append({"question": t.question, "gold": t.gold_answer,
                        "pred": pred, "correct": correct, "qtype": t.qtype,
                        "parse_ok": parse_ok})
    n = len(triples)
    overall = sum(hits.values()) / n if n else 0.0
    by_qtype = {q: hits[q] / counts[q] for q in sorted(counts)}
    return EvalReport(overall=overall, by_qtype=by_qtype, counts=counts, n=n,
                      wall_time=time.perf_counter() - start, records=records)


# ------------------------------------------------------------------ ablation


@dataclass
class AblationRow:
    name: str
    overall: float | None
    by_qtype: dict[str, float] | None
    wall_time: float
    status: str  # "ok" | "failed"
    error: str | None = None


@dataclass
class AblationReport:
    rows: list[AblationRow]


def ablation_grid_variants(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The five-variant grid: graph guidance off with one, two, and three
    operator types, then guidance on with two and three."""
    def cfg(mode: str, enabled: bool) -> ModelConfig:
        meta = base.to_meta()
        meta.update(operator_mode=mode, got_enabled=enabled)
        return ModelConfig.from_meta(meta)

    return [
        ("no_graph_one_op", cfg("one", False)),
        ("no_graph_find_log", cfg("find_log", False)),
        ("no_graph_loc_num_log", cfg("loc_num_log", False)),
        ("graph_find_log", cfg("find_log", True)),
        ("graph_loc_num_log", cfg("loc_num_log", True)),
    ]


def layer_sweep_variants(base: ModelConfig, depths: list[int]) -> list[tuple[str, ModelConfig]]:
    out = []
    for k in depths:
        meta = base.to_meta()
        meta.update(self_data_layers=k)
        out.append((f"self_data_layers_{k}", ModelConfig.from_meta(meta)))
    return out


def ablate(run: RunConfig, variants: list[tuple[str, ModelConfig]],
           train_triples: list[QATriple], eval_triples: list[QATriple],
           log: callable = None) -> AblationReport:
    """Train and evaluate each variant with the shared seed; a variant that
    raises is recorded as failed and the grid continues."""
    rows: list[AblationRow] = []
    vocab = build_vocab(train_triples + eval_triples) if train_triples else None
    for name, config in variants:
        started = time.perf_counter()
        try:
            meta = {k: v for k, v in run.__dict__.items() if k != "model"}
            variant_run = RunConfig(model=config, **{**meta, "ckpt": f"{run.ckpt}.{name}"})
            result = train(variant_run, train_triples, vocab=vocab)
            report = evaluate(result.model, eval_triples, tol=run.tol)
            rows.append(AblationRow(
                name=name, overall=report.overall, by_qtype=report.by_qtype,
                wall_time=time.perf_counter() - started, status="ok",
            ))
        except Exception as e:  # per-variant isolation is the contract
            rows.append(AblationRow(
                name=name, overall=None, by_qtype=None,
                wall_time=time.perf_counter() - started, status="failed",
                error=f"{type(e).__name__}: {e}",
            ))
        if log is not None:
            log(rows[-1])
    return AblationReport(rows=rows)


def format_ablation_table(report: AblationReport) -> str:
    headers = ["variant", "overall", "S", "D", "R", "time_s", "status"]
    lines = [headers]
    for row in report.rows:
        def pct(x):
            return "-" if x is None else f"{100 * x:.1f}"
        by = row.by_qtype or {}
        lines.append([
            row.name, pct(row.overall), pct(by.get("S")), pct(by.get("D")),
            pct(by.get("R")), f"{row.wall_time:.1f}", row.status,
        ])
    widths = [max(len(r[i]) for r in lines) for i in range(len(headers))]
    out = []
    for i, r in enumerate(lines):
        out.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
        if i == 0:
            out.append("  ".join("-" * w for w in widths))
    failures = [r for r in report.rows if r.status == "failed"]
    for r in failures:
        out.append(f"{r.name}: {r.error}")
    return "\n".join(out)


# ------------------------------------------------------------------- config


_MODEL_KEYS = {"d": int, "heads": int, "self_data_layers": int, "op_layers": int,
               "attention_arch": str, "operator_mode": str, "got_enabled": None,
               "guidance_len": int}
_TRAIN_KEYS = {"steps": int, "lr": float, "batch_size": int, "seed": int,
               "ckpt": str, "train_corpus": str, "checkpoint_every": int,
               "warmup_steps": int, "lr_floor": float}
_EVAL_KEYS = {"tol": float, "eval_corpus": str}
_PROVIDER_KEYS = {"endpoint": str}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def load_run_config(path: str | None = None) -> RunConfig:
    """RunConfig from an INI-style file with [model], [train], [eval], and
    [provider] sections; unknown sections or keys are errors.  The provider
    endpoint environment variable fills in when the file does not set one."""
    run = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            read = parser.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
        if not read:
            raise ConfigError(f"config file {path!r} not readable")
        known = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS, "eval": _EVAL_KEYS,
                 "provider": _PROVIDER_KEYS}
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, value in parser.items(section):
                if key not in known[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
        model_meta = ModelConfig().to_meta()
        for key, conv in _MODEL_KEYS.items():
            if parser.has_option("model", key):
                raw = parser.get("model", key)
                try:
                    model_meta[key] = _parse_bool(raw) if conv is None else conv(raw)
                except ValueError as e:
                    raise ConfigError(f"{path}: bad value for model.{key}: {e}") from e
        try:
            run.model = ModelConfig.from_meta(model_meta)
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from e
        for key, conv in _TRAIN_KEYS.items():
            if parser.has_option("train", key):
                try:
                    setattr(run, key, conv(parser.get("train", key)))
                except ValueError as e:
                    raise ConfigError(f"{path}: bad value for train.{key}: {e}") from e
        for key, conv in _EVAL_KEYS.items():
            if parser.has_option("eval", key):
                try:
                    setattr(run, key, conv(parser.get("eval", key)))
                except ValueError as e:
                    raise ConfigError(f"{path}: bad value for eval.{key}: {e}") from e
        if parser.has_option("provider", "endpoint"):
            run.provider = parser.get("provider", "endpoint")
    if run.provider is None:
        run.provider = os.environ.get(PROVIDER_ENV) or None
    return run
