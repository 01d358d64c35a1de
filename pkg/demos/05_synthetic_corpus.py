"""
Synthetic charts, questions, gold graphs, gold answers
======================================================

The generator draws charts, instantiates question templates against them,
and answers every question by running the graph through a symbolic
executor over the chart table.  Models train against those answers, and
the executor stays available as an oracle at evaluation time.
"""

from chartreason.synth import CorpusConfig, gen_corpus, symbolic_execute
from chartreason.templates import load_default_rules

rules = load_default_rules()
config = CorpusConfig(n_charts=3, questions_per_chart=3, seed=42)
triples = gen_corpus(config, rules)
print(f"{len(triples)} examples from {config.n_charts} charts\n")

for t in triples[:6]:
    print(f"[{t.qtype}/{t.rule_id}] {t.question}")
    print(f"    chart: {t.chart.title!r}, series {list(t.chart.series_names)}")
    print(f"    gold: {t.gold_answer!r}")

# the stored answer is exactly what the executor computes
t = triples[0]
print("\nre-running the executor:", symbolic_execute(t.chart, t.gold_got))

# qtype mix: S structural reads, D direct cell reads, R compositional
from collections import Counter

print("mix:", dict(Counter(t.qtype for t in triples)))
