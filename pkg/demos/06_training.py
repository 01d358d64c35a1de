"""
Training on a tiny corpus
=========================

End to end: generate data, train with Adam on teacher-forced
cross-entropy, checkpoint, reload, evaluate with the relaxed matcher.
Kept deliberately small so it runs in about a minute on one core.
"""

import tempfile

from chartreason.harness import (
    RunConfig,
    evaluate,
    load_model,
    relaxed_match,
    train,
)
from chartreason.reasoning import ModelConfig
from chartreason.synth import CorpusConfig, gen_corpus
from chartreason.templates import load_default_rules

rules = load_default_rules()
triples = gen_corpus(CorpusConfig(n_charts=2, questions_per_chart=3, seed=9), rules)

ckpt = tempfile.mktemp(suffix=".ckpt")
run = RunConfig(
    model=ModelConfig(d=32, heads=2, self_data_layers=1, op_layers=1),
    steps=300, lr=2e-3, batch_size=2, seed=0, ckpt=ckpt,
    warmup_steps=30, lr_floor=0.1,
)
result = train(run, triples)
print(f"first loss {result.losses[0]:.3f}, last loss {result.losses[-1]:.3f}")

# the checkpoint carries the weights, the config, and the vocabulary
model = load_model(ckpt)
report = evaluate(model, triples, tol=0.05)
print(f"accuracy {report.overall:.2f} over {report.n} examples, by type {report.by_qtype}")

# the relaxed matcher behind that score: numbers within 5% of gold pass,
# strings compare case-insensitively
print(relaxed_match("0.418", "0.414"), relaxed_match("66", "60"),
      relaxed_match("Bottom Right", "bottom right"))
